"""Run configuration: flat ``key = value`` files with dotted keys.

Example::

    task = detection
    source_dir = data/train
    gallery_dir = gallery
    output_dir = out/train_cacp
    fraction = 1/4
    prompt.mode = box+cam
    prompt.n_points = 3
    backends.captioner = real
    backends.captioner.model = /models/blip-base

Blank lines and ``#`` comments are ignored.  Later assignments win, and
command-line flags are applied on top of the file.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Mapping, Optional

from cacp.backends import ROLES
from cacp.compositor import DEFAULT_MAX_ATTEMPTS, DEFAULT_MAX_OVERLAP_IOU
from cacp.dataset_io import DEFAULT_KEEP_THRESHOLD, check_task, parse_fraction
from cacp.errors import ConfigError
from cacp.prompts import DEFAULT_MIN_SEP, DEFAULT_MODE, DEFAULT_N_POINTS, normalize_mode

INDEX_FILENAME = "cacp-index.tsv"
RATIO_FILENAME = "cacp-ratios.tsv"

# dotted key -> RunConfig attribute
_KEYS = {
    "task": "task",
    "source_dir": "source_dir",
    "gallery_dir": "gallery_dir",
    "output_dir": "output_dir",
    "ratio_table_path": "ratio_table_path",
    "index_path": "index_path",
    "fraction": "fraction",
    "variants_per_image": "variants_per_image",
    "seed": "seed",
    "workers": "workers",
    "resume": "resume",
    "prompt.mode": "prompt_mode",
    "prompt.n_points": "n_points",
    "prompt.min_sep": "min_sep",
    "composite.feather_px": "feather_px",
    "composite.max_overlap_iou": "max_overlap_iou",
    "composite.max_attempts": "max_attempts",
    "annotations.keep_threshold": "keep_threshold",
    "matcher.top_k": "top_k",
}


@dataclass
class RunConfig:
    task: str = "classification"
    source_dir: Optional[Path] = None
    gallery_dir: Optional[Path] = None
    output_dir: Optional[Path] = None
    ratio_table_path: Optional[Path] = None
    index_path: Optional[Path] = None
    fraction: int = 1
    variants_per_image: int = 1
    seed: int = 0
    workers: int = 1
    resume: bool = False
    prompt_mode: str = DEFAULT_MODE
    n_points: int = DEFAULT_N_POINTS
    min_sep: float = DEFAULT_MIN_SEP
    feather_px: float = 0.0
    max_overlap_iou: float = DEFAULT_MAX_OVERLAP_IOU
    max_attempts: int = DEFAULT_MAX_ATTEMPTS
    keep_threshold: float = DEFAULT_KEEP_THRESHOLD
    top_k: int = 1
    backends: dict = field(default_factory=lambda: {role: "real" for role in ROLES})
    model_paths: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("source_dir", "gallery_dir", "output_dir", "ratio_table_path", "index_path"):
            value = getattr(self, name)
            if value is not None and not isinstance(value, Path):
                setattr(self, name, Path(value))

    @property
    def resolved_ratio_path(self) -> Path:
        return self.ratio_table_path or Path(self.gallery_dir) / RATIO_FILENAME

    @property
    def resolved_index_path(self) -> Path:
        return self.index_path or Path(self.gallery_dir) / INDEX_FILENAME

    def set(self, key: str, value) -> None:
        """Assign one dotted key from its text (or already typed) value."""
        key = key.strip()
        if key.startswith("backends."):
            parts = key.split(".")
            if len(parts) == 2 and parts[1] in ROLES:
                self.backends[parts[1]] = str(value).strip()
                return
            if len(parts) == 3 and parts[1] in ROLES and parts[2] in ("model", "model_path"):
                self.model_paths[parts[1]] = str(value).strip()
                return
            raise ConfigError(f"unknown backend key {key!r}")
        if key == "backends":
            for role in ROLES:
                self.backends[role] = str(value).strip()
            return
        if key not in _KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        attr = _KEYS[key]
        default = next(f for f in fields(self) if f.name == attr)
        try:
            setattr(self, attr, _coerce(attr, default.type, value))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from None

    def update(self, values: Mapping[str, object]) -> "RunConfig":
        for key, value in values.items():
            if value is not None:
                self.set(key, value)
        return self

    def validate(self, require=("source_dir", "gallery_dir", "output_dir")) -> "RunConfig":
        check_task(self.task)
        for name in require:
            if getattr(self, name) is None:
                raise ConfigError(f"{name} must be set")
        self.prompt_mode = normalize_mode(self.prompt_mode)
        if not 0 <= self.n_points <= 16:
            raise ConfigError("prompt.n_points must be in [0, 16]")
        if self.min_sep < 0:
            raise ConfigError("prompt.min_sep must be non-negative")
        if self.variants_per_image < 1:
            raise ConfigError("variants_per_image must be >= 1")
        if self.max_attempts < 1:
            raise ConfigError("composite.max_attempts must be >= 1")
        if not 0 <= self.max_overlap_iou <= 1:
            raise ConfigError("composite.max_overlap_iou must be in [0, 1]")
        if not 0 <= self.keep_threshold <= 1:
            raise ConfigError("annotations.keep_threshold must be in [0, 1]")
        if self.feather_px < 0:
            raise ConfigError("composite.feather_px must be non-negative")
        if self.top_k < 1 or self.workers < 1:
            raise ConfigError("matcher.top_k and workers must be >= 1")
        for role, kind in self.backends.items():
            if kind not in ("fake", "real"):
                raise ConfigError(f"backends.{role} must be fake or real, got {kind!r}")
        return self


def _coerce(attr: str, annotation, value):
    if attr == "fraction":
        return parse_fraction(value)
    if isinstance(value, str):
        value = value.strip()
    kind = str(annotation)
    if "Path" in kind:
        return Path(os.path.expanduser(str(value)))
    if kind == "bool":
        if isinstance(value, bool):
            return value
        lowered = str(value).lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError("expected a boolean")
    if kind == "int":
        return int(value)
    if kind == "float":
        return float(value)
    return str(value)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_config(path: Optional[Path] = None, overrides: Optional[Mapping[str, object]] = None) -> RunConfig:
    config = RunConfig()
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        config.update(parse_config_text(text, str(path)))
    if overrides:
        config.update(overrides)
    return config
