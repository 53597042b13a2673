"""Model-role interfaces and their implementations.

The pipeline talks to five roles: a captioner, a text embedder, an object
detector, a promptable segmenter and a saliency mapper.  Each role has a
deterministic fake that needs no weights (used by the test-suite and by
``--backends fake`` runs) and a thin adapter around the real model.  Real
adapters import their heavy dependencies lazily and raise
``BackendUnavailableError`` when they cannot be loaded.
"""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Protocol, Sequence, runtime_checkable

import numpy as np
from scipy import ndimage

from cacp.errors import BackendUnavailableError, ConfigError, EmptyTextError, InvalidPromptError
from cacp.geometry import BBox, image_hw

logger = logging.getLogger(__name__)

ROLES = ("captioner", "embedder", "detector", "segmenter", "saliency")


@dataclass(frozen=True)
class Heatmap:
    """Per-pixel saliency in [0, 1] with the same height/width as its image."""

    grid: np.ndarray
    source_label: str = ""

    def __post_init__(self):
        if self.grid.ndim != 2:
            raise ValueError("heatmap grid must be 2-D")
        if not np.all(np.isfinite(self.grid)) or self.grid.min() < 0 or self.grid.max() > 1:
            raise ValueError("heatmap values must lie in [0, 1]")


@dataclass(frozen=True)
class PromptPoint:
    x: int
    y: int
    positive: bool = True


@dataclass(frozen=True)
class PromptBundle:
    """Box plus optional foreground points handed to a segmenter."""

    box: BBox
    points: tuple[PromptPoint, ...] = ()
    mode: str = "box_only"

    MAX_POINTS = 16

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(self.points))
        if len(self.points) > self.MAX_POINTS:
            raise InvalidPromptError(f"at most {self.MAX_POINTS} points allowed, got {len(self.points)}")
        for p in self.points:
            if not self.box.contains_point(p.x, p.y):
                raise InvalidPromptError(f"point ({p.x}, {p.y}) lies outside box {self.box.as_tuple()}")


@runtime_checkable
class Captioner(Protocol):
    def caption(self, image: np.ndarray) -> str:
        ...


@runtime_checkable
class TextEmbedder(Protocol):
    dim: int

    def embed(self, text: str) -> np.ndarray:
        ...


@runtime_checkable
class Detector(Protocol):
    def detect(self, image: np.ndarray, category_hint: Optional[str] = None) -> list[BBox]:
        ...


@runtime_checkable
class Segmenter(Protocol):
    def segment(self, image: np.ndarray, prompt: PromptBundle) -> np.ndarray:
        ...


@runtime_checkable
class SaliencyMapper(Protocol):
    def saliency(self, image: np.ndarray, label: str) -> Heatmap:
        ...


def _check_image(image: np.ndarray, *, rgb: bool = False) -> None:
    if image.ndim < 2 or image.shape[0] == 0 or image.shape[1] == 0:
        raise ValueError("image must be non-empty")
    if rgb and (image.ndim != 3 or image.shape[2] != 3):
        raise ValueError(f"expected an HxWx3 image, got shape {image.shape}")


def _digest_seed(data: bytes) -> int:
    return int.from_bytes(hashlib.sha256(data).digest()[:8], "little")


def sort_boxes(boxes: Sequence[BBox]) -> list[BBox]:
    """Descending score; ties go to the smaller (y_min, x_min)."""
    return sorted(boxes, key=lambda b: (-b.score, b.y_min, b.x_min, b.y_max, b.x_max, b.label))


# -- fakes -------------------------------------------------------------------

FAKE_PHRASES = (
    "a dog sitting on the grass",
    "two teams are playing football games",
    "a boy is standing near a red car",
    "a cat sleeping on a sofa",
    "a busy street with cars and people",
    "a bowl of fruit on a wooden table",
    "a person riding a bicycle in the park",
    "a bird perched on a tree branch",
)


class FakeCaptioner:
    """Captions by hashing pixel content into a fixed phrase table.

    An all-zero image is always "a blank image".  ``planted`` maps the
    sha256 hex digest of an image's bytes (see ``image_digest``) to a
    caption and takes precedence over the table.
    """

    BLANK = "a blank image"

    def __init__(self, phrases: Sequence[str] = FAKE_PHRASES, planted: Optional[Mapping[str, str]] = None):
        self.phrases = tuple(phrases)
        self.planted = dict(planted or {})

    @staticmethod
    def image_digest(image: np.ndarray) -> str:
        arr = np.ascontiguousarray(image)
        return hashlib.sha256(repr(arr.shape).encode() + arr.tobytes()).hexdigest()

    def plant(self, image: np.ndarray, caption: str) -> None:
        self.planted[self.image_digest(image)] = caption

    def caption(self, image: np.ndarray) -> str:
        _check_image(image, rgb=True)
        digest = self.image_digest(image)
        if digest in self.planted:
            return self.planted[digest]
        if not image.any():
            return self.BLANK
        return self.phrases[int(digest, 16) % len(self.phrases)]


class FakeEmbedder:
    """Maps each string to a reproducible pseudo-random unit vector.

    The generator is seeded from the sha256 of the UTF-8 bytes.  Strings in
    ``planted`` bypass the generator and return the planted vector as is,
    which lets tests fix exact similarity values.
    """

    def __init__(self, dim: int = 64, planted: Optional[Mapping[str, Sequence[float]]] = None):
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.planted: dict[str, np.ndarray] = {}
        for text, vec in (planted or {}).items():
            self.plant(text, vec)

    def plant(self, text: str, vector: Sequence[float]) -> None:
        vec = np.asarray(vector, dtype=np.float32).copy()
        if vec.shape != (self.dim,):
            raise ValueError(f"planted vector for {text!r} must have shape ({self.dim},)")
        vec.setflags(write=False)
        self.planted[text] = vec

    def embed(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise EmptyTextError("cannot embed empty text")
        if text in self.planted:
            return self.planted[text]
        rng = np.random.default_rng(_digest_seed(text.encode("utf-8")))
        vec = rng.standard_normal(self.dim)
        vec = (vec / np.linalg.norm(vec)).astype(np.float32)
        vec.setflags(write=False)
        return vec


class FakeDetector:
    """Connected components of non-black pixels, one box per component.

    A component's label is looked up from ``palette`` (RGB triple -> name)
    using its most frequent colour.  Components whose colour is not in the
    palette get ``default_label``; when that is None they adopt the
    category hint (or "object" without one), so unannotated images behave
    like perfect detections of whatever was asked for.
    """

    def __init__(self, palette: Optional[Mapping[tuple, str]] = None, default_label: Optional[str] = None):
        self.palette = {tuple(int(c) for c in k): v for k, v in (palette or {}).items()}
        self.default_label = default_label

    def detect(self, image: np.ndarray, category_hint: Optional[str] = None) -> list[BBox]:
        _check_image(image)
        pixels = image if image.ndim == 3 else image[:, :, None]
        foreground = pixels.any(axis=2)
        labels, count = ndimage.label(foreground, structure=np.ones((3, 3), dtype=int))
        boxes = []
        for index, slc in enumerate(ndimage.find_objects(labels), start=1):
            if slc is None:
                continue
            ys, xs = slc
            name = self._component_label(pixels[slc][labels[slc] == index], category_hint)
            boxes.append(BBox(xs.start, ys.start, xs.stop, ys.stop, name, 1.0))
        if category_hint is not None:
            boxes = [b for b in boxes if b.label == category_hint]
        return sort_boxes(boxes)

    def _component_label(self, colours: np.ndarray, hint: Optional[str]) -> str:
        if self.palette:
            values, counts = np.unique(colours.reshape(len(colours), -1), axis=0, return_counts=True)
            key = tuple(int(c) for c in values[np.argmax(counts)])
            if key in self.palette:
                return self.palette[key]
        if self.default_label is not None:
            return self.default_label
        return hint if hint is not None else "object"


class FakeSegmenter:
    """Box fill for box-only prompts, inscribed ellipse when points are given."""

    def segment(self, image: np.ndarray, prompt: PromptBundle) -> np.ndarray:
        _check_image(image)
        h, w = image_hw(image)
        box = prompt.box
        if not box.within(w, h):
            raise InvalidPromptError(f"box {box.as_tuple()} exceeds image {w}x{h}")
        for p in prompt.points:
            if not box.contains_point(p.x, p.y):
                raise InvalidPromptError(f"point ({p.x}, {p.y}) outside box {box.as_tuple()}")
        mask = np.zeros((h, w), dtype=bool)
        if not prompt.points:
            mask[box.y_min:box.y_max, box.x_min:box.x_max] = True
            return mask
        cx = (box.x_min + box.x_max) / 2.0
        cy = (box.y_min + box.y_max) / 2.0
        ys, xs = np.mgrid[box.y_min:box.y_max, box.x_min:box.x_max]
        inside = ((xs + 0.5 - cx) / (box.width / 2.0)) ** 2 + ((ys + 0.5 - cy) / (box.height / 2.0)) ** 2 <= 1.0
        mask[box.y_min:box.y_max, box.x_min:box.x_max] = inside
        return mask


class FakeSaliency:
    """Gaussian bump centred on the best detected box for ``label``.

    Falls back to any detected box, then to the image centre.  The peak is
    exactly 1.0 at the box's integer centre pixel and decays monotonically
    with Euclidean distance.
    """

    def __init__(self, detector: Optional[Detector] = None):
        self.detector = detector or FakeDetector()

    def saliency(self, image: np.ndarray, label: str) -> Heatmap:
        _check_image(image)
        h, w = image_hw(image)
        boxes = self.detector.detect(image, label) or self.detector.detect(image)
        box = boxes[0] if boxes else BBox(0, 0, w, h)
        cx, cy = box.center
        sigma = max(box.diagonal / 2.0, 1.0)
        ys, xs = np.mgrid[0:h, 0:w]
        grid = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma**2))
        return Heatmap(np.clip(grid, 0.0, 1.0), label)


# -- real adapters -----------------------------------------------------------

MODEL_DIR_ENV = "CACP_MODEL_DIR"

_DEFAULT_MODEL_NAMES = {
    "captioner": "blip-image-captioning-base",
    "embedder": "bert-base-uncased",
    "detector": "yolo-365.pt",
    "segmenter": "sam_vit_h.pth",
    "saliency": "resnet50",
}


def resolve_model_path(role: str, path: Optional[str] = None) -> str:
    if path:
        return path
    base = os.environ.get(MODEL_DIR_ENV)
    if not base:
        raise BackendUnavailableError(
            f"no model path configured for real {role}; set backends.{role}.model or ${MODEL_DIR_ENV}"
        )
    return str(Path(base) / _DEFAULT_MODEL_NAMES[role])


def _unavailable(role: str, exc: BaseException) -> BackendUnavailableError:
    return BackendUnavailableError(f"real {role} backend could not be loaded: {exc}")


class BlipCaptioner:
    def __init__(self, model_path: Optional[str] = None, device: str = "cpu"):
        path = resolve_model_path("captioner", model_path)
        try:
            from transformers import BlipForConditionalGeneration, BlipProcessor

            self.processor = BlipProcessor.from_pretrained(path)
            self.model = BlipForConditionalGeneration.from_pretrained(path).to(device).eval()
        except Exception as exc:  # import errors, missing weights, bad checkpoints
            raise _unavailable("captioner", exc) from exc
        self.device = device

    def caption(self, image: np.ndarray) -> str:
        import torch

        _check_image(image, rgb=True)
        inputs = self.processor(images=image, return_tensors="pt").to(self.device)
        with torch.no_grad():
            out = self.model.generate(**inputs, max_new_tokens=40)
        text = self.processor.decode(out[0], skip_special_tokens=True).strip()
        return text or FakeCaptioner.BLANK


class BertEmbedder:
    """Sentence embedding from a BERT encoder; ``pooling`` is "mean" or "cls"."""

    def __init__(self, model_path: Optional[str] = None, pooling: str = "mean", device: str = "cpu"):
        if pooling not in ("mean", "cls"):
            raise ConfigError(f"unknown pooling {pooling!r}")
        path = resolve_model_path("embedder", model_path)
        try:
            from transformers import AutoModel, AutoTokenizer

            self.tokenizer = AutoTokenizer.from_pretrained(path)
            self.model = AutoModel.from_pretrained(path).to(device).eval()
        except Exception as exc:
            raise _unavailable("embedder", exc) from exc
        self.pooling = pooling
        self.device = device
        self.dim = int(self.model.config.hidden_size)

    def embed(self, text: str) -> np.ndarray:
        import torch

        if not text or not text.strip():
            raise EmptyTextError("cannot embed empty text")
        tokens = self.tokenizer(text, return_tensors="pt", truncation=True).to(self.device)
        with torch.no_grad():
            hidden = self.model(**tokens).last_hidden_state[0]
        if self.pooling == "cls":
            vec = hidden[0]
        else:
            weights = tokens["attention_mask"][0].unsqueeze(-1).to(hidden.dtype)
            vec = (hidden * weights).sum(0) / weights.sum()
        return vec.cpu().numpy().astype(np.float32)


class YoloDetector:
    def __init__(self, model_path: Optional[str] = None, conf: float = 0.25):
        path = resolve_model_path("detector", model_path)
        try:
            from ultralytics import YOLO

            self.model = YOLO(path)
        except Exception as exc:
            raise _unavailable("detector", exc) from exc
        self.conf = conf

    def detect(self, image: np.ndarray, category_hint: Optional[str] = None) -> list[BBox]:
        _check_image(image)
        h, w = image_hw(image)
        result = self.model.predict(image, conf=self.conf, verbose=False)[0]
        names = result.names
        boxes = []
        for xyxy, cls, score in zip(result.boxes.xyxy.tolist(), result.boxes.cls.tolist(), result.boxes.conf.tolist()):
            x0, y0 = max(0, int(np.floor(xyxy[0]))), max(0, int(np.floor(xyxy[1])))
            x1, y1 = min(w, int(np.ceil(xyxy[2]))), min(h, int(np.ceil(xyxy[3])))
            if x1 <= x0 or y1 <= y0:
                continue
            boxes.append(BBox(x0, y0, x1, y1, str(names[int(cls)]), float(min(max(score, 0.0), 1.0))))
        if category_hint is not None:
            boxes = [b for b in boxes if b.label == category_hint]
        return sort_boxes(boxes)


class SamSegmenter:
    def __init__(self, model_path: Optional[str] = None, model_type: str = "vit_h", device: str = "cpu"):
        path = resolve_model_path("segmenter", model_path)
        try:
            from segment_anything import SamPredictor, sam_model_registry

            sam = sam_model_registry[model_type](checkpoint=path).to(device)
            self.predictor = SamPredictor(sam)
        except Exception as exc:
            raise _unavailable("segmenter", exc) from exc

    def segment(self, image: np.ndarray, prompt: PromptBundle) -> np.ndarray:
        _check_image(image, rgb=True)
        self.predictor.set_image(image)
        kwargs = {"box": np.array(prompt.box.as_tuple(), dtype=np.float32), "multimask_output": False}
        if prompt.points:
            kwargs["point_coords"] = np.array([[p.x, p.y] for p in prompt.points], dtype=np.float32)
            kwargs["point_labels"] = np.array([1 if p.positive else 0 for p in prompt.points])
        masks, _, _ = self.predictor.predict(**kwargs)
        return masks[0].astype(bool)


class GradCamSaliency:
    """Grad-CAM over a torchvision ImageNet classifier.

    ``label`` is matched against the classifier's category names; when it
    is not among them the top-scoring class is explained instead.
    """

    def __init__(self, model_name: Optional[str] = None):
        try:
            import torchvision
            from pytorch_grad_cam import GradCAM

            name = model_name or "resnet50"
            weights = torchvision.models.get_model_weights(name).DEFAULT
            self.model = torchvision.models.get_model(name, weights=weights).eval()
            self.categories = [c.lower() for c in weights.meta["categories"]]
            self.transform = weights.transforms()
            self.cam = GradCAM(model=self.model, target_layers=[self.model.layer4[-1]])
        except Exception as exc:
            raise _unavailable("saliency", exc) from exc

    def saliency(self, image: np.ndarray, label: str) -> Heatmap:
        import cv2
        import torch
        from pytorch_grad_cam.utils.model_targets import ClassifierOutputTarget

        _check_image(image, rgb=True)
        h, w = image_hw(image)
        tensor = self.transform(torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)).unsqueeze(0)
        key = label.lower().replace("_", " ")
        targets = [ClassifierOutputTarget(self.categories.index(key))] if key in self.categories else None
        grid = self.cam(input_tensor=tensor, targets=targets)[0]
        grid = cv2.resize(grid.astype(np.float32), (w, h), interpolation=cv2.INTER_LINEAR)
        return Heatmap(np.clip(grid.astype(np.float64), 0.0, 1.0), label)


# -- registry ----------------------------------------------------------------


@dataclass
class Backends:
    captioner: Captioner
    embedder: TextEmbedder
    detector: Detector
    segmenter: Segmenter
    saliency: SaliencyMapper
    kinds: dict = field(default_factory=dict)


def fake_backends(palette: Optional[Mapping[tuple, str]] = None, embed_dim: int = 64) -> Backends:
    detector = FakeDetector(palette)
    return Backends(
        captioner=FakeCaptioner(),
        embedder=FakeEmbedder(embed_dim),
        detector=detector,
        segmenter=FakeSegmenter(),
        saliency=FakeSaliency(detector),
        kinds={role: "fake" for role in ROLES},
    )


_REAL = {
    "captioner": BlipCaptioner,
    "embedder": BertEmbedder,
    "detector": YoloDetector,
    "segmenter": SamSegmenter,
    "saliency": GradCamSaliency,
}


def make_backends(selection: Mapping[str, str], model_paths: Optional[Mapping[str, str]] = None) -> Backends:
    """Build one instance per role from ``{"captioner": "fake"|"real", ...}``.

    Roles missing from ``selection`` default to fake.
    """
    model_paths = model_paths or {}
    unknown = set(selection) - set(ROLES)
    if unknown:
        raise ConfigError(f"unknown backend roles: {sorted(unknown)}")
    fakes = fake_backends()
    built = {}
    for role in ROLES:
        kind = selection.get(role, "fake")
        if kind == "fake":
            built[role] = getattr(fakes, role)
        elif kind == "real":
            logger.info("loading real %s backend", role)
            built[role] = _REAL[role](model_paths.get(role))
        else:
            raise ConfigError(f"backends.{role} must be 'fake' or 'real', got {kind!r}")
    if selection.get("saliency", "fake") == "fake":
        built["saliency"] = FakeSaliency(built["detector"])
    return Backends(**built, kinds={role: selection.get(role, "fake") for role in ROLES})
