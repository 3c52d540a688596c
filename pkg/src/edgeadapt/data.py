"""Multi-view datasets, paired source/target batching and a synthetic shift task."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Literal, Optional

import numpy as np

from .errors import DataError, ShapeError

Domain = Literal["source", "target"]
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}
ARCHIVE_VERSION = 1


@dataclass(frozen=True)
class MultiViewSample:
    views: tuple[np.ndarray, ...]
    label: Optional[int]
    domain: Domain


@dataclass(frozen=True, eq=False)
class DomainDataset:
    """Immutable stack of K-view samples.

    ``views`` has shape ``N x K x Ch x Hv x Wv``. Target datasets carry no
    training labels; their ground truth, when known, lives in ``eval_labels``
    and is only read by evaluation code.
    """

    views: np.ndarray
    labels: Optional[np.ndarray]
    class_count: int
    domain: Domain
    eval_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.class_count < 2:
            raise DataError("class_count must be at least 2")
        if self.views.ndim != 5:
            raise ShapeError(f"views must be N x K x Ch x H x W, got {self.views.shape}")
        if self.domain == "source":
            if self.labels is None:
                raise DataError("source samples must be labelled")
            present = np.unique(self.labels)
            if len(present) != self.class_count:
                raise DataError("source data must contain every class at least once")
        for arr in (self.labels, self.eval_labels):
            if arr is None:
                continue
            if len(arr) != len(self.views):
                raise DataError("label count does not match sample count")
            if len(arr) and (arr.min() < 0 or arr.max() >= self.class_count):
                raise DataError("label outside [0, class_count)")
        self.views.setflags(write=False)

    def __len__(self) -> int:
        return len(self.views)

    def __getitem__(self, i: int) -> MultiViewSample:
        label = None if self.labels is None else int(self.labels[i])
        return MultiViewSample(tuple(self.views[i]), label, self.domain)

    @property
    def k_devices(self) -> int:
        return self.views.shape[1]

    @property
    def truth(self) -> Optional[np.ndarray]:
        """Labels usable for scoring: training labels, else held-back ones."""
        return self.labels if self.labels is not None else self.eval_labels


@dataclass(frozen=True)
class PairedBatch:
    source_views: np.ndarray
    source_labels: np.ndarray
    target_views: np.ndarray
    target_index: np.ndarray


def split_views(image: np.ndarray, k_devices: int, view_size: int) -> list[np.ndarray]:
    """Crop ``Ch x H x W`` into device views.

    K=4 gives the four corner crops (top-left, top-right, bottom-left,
    bottom-right); K=1 gives the centre crop.
    """
    _, h, w = image.shape
    if view_size > h or view_size > w:
        raise ShapeError(f"view size {view_size} exceeds image {h}x{w}")
    if k_devices == 4:
        anchors = [(r, c) for r in (0, h - view_size) for c in (0, w - view_size)]
    elif k_devices == 1:
        anchors = [((h - view_size) // 2, (w - view_size) // 2)]
    else:
        raise ValueError(f"k_devices must be 1 or 4, got {k_devices}")
    return [image[:, r : r + view_size, c : c + view_size] for r, c in anchors]


def stack_views(images: np.ndarray, k_devices: int, view_size: int) -> np.ndarray:
    """Apply :func:`split_views` to ``N x Ch x H x W`` images."""
    return np.stack([np.stack(split_views(im, k_devices, view_size)) for im in images])


def make_paired_loader(
    source: DomainDataset, target: DomainDataset, n_b: int, rng_seed: int
) -> Iterator[PairedBatch]:
    """One epoch of paired batches.

    Both datasets are shuffled independently; the shorter one restarts with
    a fresh permutation when exhausted, so the epoch has
    ``ceil(max(N_s, N_t) / n_b)`` batches of exactly ``n_b`` from each side.
    """
    if len(source) == 0 or len(target) == 0:
        raise DataError("cannot pair an empty dataset")
    if n_b < 1:
        raise ValueError("batch size must be positive")
    rng = np.random.default_rng(rng_seed)
    n_batches = math.ceil(max(len(source), len(target)) / n_b)
    need = n_batches * n_b
    src_idx = _cycled_permutation(rng, len(source), need)
    tgt_idx = _cycled_permutation(rng, len(target), need)
    for b in range(n_batches):
        s = src_idx[b * n_b : (b + 1) * n_b]
        t = tgt_idx[b * n_b : (b + 1) * n_b]
        yield PairedBatch(source.views[s], source.labels[s], target.views[t], t)


def _cycled_permutation(rng: np.random.Generator, n: int, need: int) -> np.ndarray:
    chunks, have = [], 0
    while have < need:
        chunks.append(rng.permutation(n))
        have += n
    return np.concatenate(chunks)[:need]


# -- synthetic covariate shift --------------------------------------------------


@dataclass(frozen=True)
class ShiftSpec:
    """Covariate shift applied to the target domain.

    The class structure lives in a 2-D latent; the target latent is rotated
    by ``rotation_deg`` about the origin and translated, and target images
    get a per-channel colour offset.
    """

    rotation_deg: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)
    color_shift: tuple[float, float, float] = (0.0, 0.0, 0.0)
    layout: Literal["ray", "ring"] = "ray"
    radius: float = 1.5
    gap: float = 1.2
    spread: float = 0.3
    pixel_noise: float = 0.05
    canvas: int = 24
    view_size: int = 16
    channels: int = 3

    def to_dict(self) -> dict:
        d = asdict(self)
        d["translation"] = list(self.translation)
        d["color_shift"] = list(self.color_shift)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ShiftSpec":
        d = dict(d)
        d["translation"] = tuple(d["translation"])
        d["color_shift"] = tuple(d["color_shift"])
        return cls(**d)


@dataclass(frozen=True)
class _Renderer:
    patterns: np.ndarray  # n_feat x Ch x H x W
    bias: np.ndarray  # Ch x H x W


def _latent_features(u: np.ndarray) -> np.ndarray:
    # bounded polynomial and harmonic features of the 2-D latent
    x, y = u[:, 0] / 3, u[:, 1] / 3
    return np.stack(
        [x, y, np.tanh(x * y), np.tanh(x**2 - y**2), np.sin(2 * x), np.sin(2 * y), np.cos(2 * (x + y))],
        axis=1,
    )


def _make_renderer(spec: ShiftSpec, rng: np.random.Generator) -> _Renderer:
    n_feat = _latent_features(np.zeros((1, 2))).shape[1]
    ch, size = spec.channels, spec.canvas
    # smooth random fields: low-frequency cosines over the canvas
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    patterns = np.zeros((n_feat, ch, size, size))
    for f in range(n_feat):
        for c in range(ch):
            for _ in range(3):
                kx, ky = rng.uniform(0.5, 2.5, size=2)
                phase = rng.uniform(0, 2 * np.pi)
                patterns[f, c] += rng.normal() * np.cos(2 * np.pi * (kx * xx + ky * yy) + phase)
    patterns /= np.sqrt(3)
    bias = 0.2 * rng.normal(size=(ch, size, size))
    return _Renderer(patterns, bias)


def _class_centres(spec: ShiftSpec, num_classes: int) -> np.ndarray:
    if spec.layout == "ring":
        angles = 2 * np.pi * np.arange(num_classes) / num_classes
        return spec.radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    # "ray": classes spaced along the positive x axis, distinguished by radius
    r = spec.radius + spec.gap * np.arange(num_classes)
    return np.stack([r, np.zeros(num_classes)], axis=1)


def _render(
    u: np.ndarray, renderer: _Renderer, color: np.ndarray, noise: float, rng: np.random.Generator
) -> np.ndarray:
    feats = _latent_features(u)
    logits = np.einsum("nf,fchw->nchw", feats, renderer.patterns) + renderer.bias
    logits = logits + color[None, :, None, None]
    logits = logits + noise * rng.normal(size=logits.shape)
    return 1.0 / (1.0 + np.exp(-logits))


def synth_shift_dataset(
    spec: ShiftSpec, n_per_class: int, num_classes: int, k_devices: int, rng_seed: int
) -> tuple[DomainDataset, DomainDataset]:
    """Labelled source and shifted, label-held-back target datasets.

    Deterministic given ``rng_seed``; pixel values lie in [0, 1].
    """
    if num_classes < 2 or n_per_class < 1:
        raise ValueError("need num_classes >= 2 and n_per_class >= 1")
    world, src_rng, tgt_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(rng_seed).spawn(3)
    )
    renderer = _make_renderer(spec, world)
    centres = _class_centres(spec, num_classes)
    theta = np.deg2rad(spec.rotation_deg)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])

    def build(rng, domain):
        labels = np.repeat(np.arange(num_classes), n_per_class)
        u = centres[labels] + spec.spread * rng.normal(size=(len(labels), 2))
        color = np.zeros(spec.channels)
        if domain == "target":
            u = u @ rot.T + np.asarray(spec.translation)
            color = np.asarray(spec.color_shift, dtype=float)[: spec.channels]
        images = _render(u, renderer, color, spec.pixel_noise, rng)
        views = stack_views(images, k_devices, spec.view_size).astype(np.float32)
        if domain == "source":
            return DomainDataset(views, labels, num_classes, "source")
        return DomainDataset(views, None, num_classes, "target", eval_labels=labels)

    return build(src_rng, "source"), build(tgt_rng, "target")


# -- persistence ----------------------------------------------------------------


def save_archive(path, source: DomainDataset, target: DomainDataset, meta: dict) -> None:
    """Write both domains plus the generating seed/spec to one ``.npz``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"version": ARCHIVE_VERSION, "class_count": source.class_count, **meta}
    arrays = {
        "source_views": source.views,
        "source_labels": source.labels,
        "target_views": target.views,
        "header": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
    }
    if target.eval_labels is not None:
        arrays["target_eval_labels"] = target.eval_labels
    with open(path, "wb") as fh:
        np.savez_compressed(fh, **arrays)


def load_archive(path) -> tuple[DomainDataset, DomainDataset, dict]:
    try:
        with np.load(Path(path)) as z:
            header = json.loads(z["header"].tobytes().decode())
            c = header["class_count"]
            source = DomainDataset(z["source_views"], z["source_labels"], c, "source")
            eval_labels = z["target_eval_labels"] if "target_eval_labels" in z else None
            target = DomainDataset(z["target_views"], None, c, "target", eval_labels)
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read dataset archive {path}: {exc}") from exc
    return source, target, header


def load_image_folder(
    root, domain: Domain, k_devices: int = 4, view_size: int = 150, canvas: int = 224,
    class_names: Optional[list[str]] = None,
) -> tuple[DomainDataset, list[str]]:
    """Read ``root/<class_name>/<image>`` into a multi-view dataset.

    Images are converted to RGB, resized to ``canvas x canvas`` and scaled to
    [0, 1] before splitting. Target datasets keep their folder labels only as
    held-back evaluation labels.
    """
    from PIL import Image

    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    names = class_names or sorted(p.name for p in root.iterdir() if p.is_dir())
    images, labels = [], []
    for c, name in enumerate(names):
        for f in sorted((root / name).iterdir()) if (root / name).is_dir() else []:
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            with Image.open(f) as im:
                im = im.convert("RGB").resize((canvas, canvas))
                images.append(np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0)
            labels.append(c)
    if not images:
        raise DataError(f"no images found under {root}")
    views = stack_views(np.stack(images), k_devices, view_size)
    labels = np.asarray(labels)
    if domain == "source":
        return DomainDataset(views, labels, len(names), "source"), names
    return DomainDataset(views, None, len(names), "target", eval_labels=labels), names
