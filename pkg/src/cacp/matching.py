"""Caption-to-category matching over text embeddings."""

from __future__ import annotations

import base64
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np

from cacp.errors import EmptyGalleryError, EmptyTextError, MalformedAnnotationError

EMB_HEADER_PREFIX = "CACP-EMB v1"


@dataclass(frozen=True)
class SimilarityScore:
    category: str
    score: float


@dataclass(frozen=True)
class MatchResult:
    base_caption: str
    ranking: tuple[SimilarityScore, ...]
    chosen: str

    def summary(self, top: int = 3) -> dict:
        return {
            "chosen": self.chosen,
            "top": [[s.category, round(s.score, 6)] for s in self.ranking[:top]],
        }


def category_text(category: str) -> str:
    """Embedder input for a category folder name."""
    return category.replace("_", " ").lower()


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    denom = np.linalg.norm(u) * np.linalg.norm(v)
    if denom == 0.0:
        return 0.0
    return float(np.clip(np.dot(u, v) / denom, -1.0, 1.0))


def similarity(caption: str, category: str, embedder) -> SimilarityScore:
    if not caption.strip() or not category.strip():
        raise EmptyTextError("caption and category must be non-empty")
    return SimilarityScore(category, cosine(embedder.embed(caption), embedder.embed(category_text(category))))


class CategoryEmbeddings(Mapping[str, np.ndarray]):
    """Read-only category -> vector cache, built once per run."""

    def __init__(self, vectors: Mapping[str, np.ndarray]):
        self._vectors = {}
        for cat, vec in vectors.items():
            vec = np.array(vec, dtype=np.float32)
            vec.setflags(write=False)
            self._vectors[cat] = vec

    def __getitem__(self, category: str) -> np.ndarray:
        return self._vectors[category]

    def __iter__(self):
        return iter(self._vectors)

    def __len__(self) -> int:
        return len(self._vectors)

    @property
    def dim(self) -> Optional[int]:
        for vec in self._vectors.values():
            return int(vec.shape[0])
        return None

    def save(self, path: Path) -> Path:
        path = Path(path)
        lines = [f"{EMB_HEADER_PREFIX} dim={self.dim or 0}"]
        for cat, vec in self._vectors.items():
            lines.append(f"{cat}\t{base64.b64encode(vec.astype('<f4').tobytes()).decode('ascii')}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Path) -> "CategoryEmbeddings":
        path = Path(path)
        lines = path.read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith(EMB_HEADER_PREFIX + " dim="):
            raise MalformedAnnotationError(path, "missing CACP-EMB header", line=1)
        dim = int(lines[0].split("dim=", 1)[1])
        vectors = {}
        for lineno, line in enumerate(lines[1:], start=2):
            if not line:
                continue
            try:
                cat, payload = line.split("\t")
                vec = np.frombuffer(base64.b64decode(payload, validate=True), dtype="<f4")
            except ValueError as exc:
                raise MalformedAnnotationError(path, str(exc), line=lineno) from exc
            if vec.shape != (dim,):
                raise MalformedAnnotationError(path, f"expected {dim} values, got {vec.shape[0]}", line=lineno)
            vectors[cat] = vec
        return cls(vectors)


def embed_categories(categories: Iterable[str], embedder) -> CategoryEmbeddings:
    """Embed each category name exactly once."""
    return CategoryEmbeddings({cat: embedder.embed(category_text(cat)) for cat in categories})


def rank_categories(caption: str, cache: Mapping[str, np.ndarray], embedder) -> list[SimilarityScore]:
    if not cache:
        raise EmptyGalleryError("no categories to match against")
    cap_vec = embedder.embed(caption)
    scores = [SimilarityScore(cat, cosine(cap_vec, vec)) for cat, vec in cache.items()]
    return sorted(scores, key=lambda s: (-s.score, s.category))


def match_category(
    base_image: np.ndarray,
    categories,
    captioner,
    embedder,
    cache: Optional[Mapping[str, np.ndarray]] = None,
    top_k: int = 1,
    rng_seed: Optional[int] = None,
) -> MatchResult:
    """Caption ``base_image`` and pick the most similar gallery category.

    ``categories`` is a GalleryIndex or any iterable of names.  With
    ``top_k > 1`` the choice is uniform among the ``top_k`` best categories
    (seeded by ``rng_seed``); the ranking is unaffected.
    """
    names = list(getattr(categories, "categories", categories))
    if not names:
        raise EmptyGalleryError("gallery has no categories")
    if cache is None:
        cache = embed_categories(names, embedder)
    else:
        cache = {cat: cache[cat] for cat in names}
    caption = captioner.caption(base_image)
    ranking = tuple(rank_categories(caption, cache, embedder))
    chosen = ranking[0].category
    if top_k > 1:
        k = min(top_k, len(ranking))
        chosen = ranking[int(np.random.default_rng(rng_seed).integers(k))].category
    return MatchResult(caption, ranking, chosen)
