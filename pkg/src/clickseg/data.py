"""Dataset handling: multi-label to binary explosion, intensity
normalization, the on-disk sample format, and a seeded synthetic
abdominal-phantom generator for desk-scale training and evaluation.

On-disk layout::

    dataset_root/
      manifest.json               # cases, train/val splits, folds, seed
      {case_id}/
        {slice_index:04d}.img     # raw little-endian float32, row-major
        {slice_index:04d}.lbl     # uint8 multi-label mask, row-major
        {slice_index:04d}.json    # sidecar: width/height/spacing/dtype/structures
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import BinaryMask, Grid2D, Spacing

log = logging.getLogger(__name__)

STRUCTURE_CLASSES = {1: "organ", 2: "rim_organ", 3: "lesion"}
CLASS_IDS = {name: cid for cid, name in STRUCTURE_CLASSES.items()}

# mean intensity offset over background, per class
_CLASS_OFFSET = {1: 0.90, 2: 0.75, 3: 1.10}
_MIN_STRUCTURE_PIXELS = 4


@dataclass(frozen=True)
class Sample:
    """One slice: image plus multi-label mask (0 = background)."""

    image: Grid2D
    label: np.ndarray  # (H, W) uint8
    spacing: Spacing
    case_id: str
    slice_index: int
    structures: dict[int, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        lbl = np.asarray(self.label)
        if lbl.shape != self.image.values.shape:
            raise ValueError(f"label dims {lbl.shape} != image dims {self.image.values.shape}")
        object.__setattr__(self, "label", lbl.astype(np.uint8))


@dataclass(frozen=True)
class BinarySample:
    """One training/eval item: normalized image and a non-empty binary gt."""

    image: Grid2D
    gt: BinaryMask
    structure_id: int
    case_id: str = ""
    slice_index: int = -1

    def __post_init__(self) -> None:
        if self.gt.is_empty():
            raise ValueError("BinarySample ground truth must be non-empty")


@dataclass(frozen=True)
class SyntheticConfig:
    size: int = 96
    count: int = 100
    seed: int = 4242
    spacing: Spacing = (1.0, 1.0)
    classes: tuple[str, ...] = ("organ", "rim_organ", "lesion")
    class_priors: tuple[float, ...] = (1.0, 1.0, 1.0)
    max_structures: int = 3
    texture_amplitude: float = 0.15  # smooth background texture
    noise_amplitude: float = 0.08  # per-pixel iid noise
    slices_per_case: int = 10

    def __post_init__(self) -> None:
        if self.size % 16:
            raise ValueError(f"size {self.size} must be divisible by 16")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if len(self.classes) != len(self.class_priors):
            raise ValueError("classes and class_priors lengths differ")
        for c in self.classes:
            if c not in CLASS_IDS:
                raise ValueError(f"unknown structure class {c!r}")


def normalize_intensities(image: Grid2D, scope: str = "per_slice") -> Grid2D:
    """Zero-mean unit-std normalization. Near-constant slices map to zero."""
    if scope != "per_slice":
        raise ValueError(f"unsupported normalization scope {scope!r}")
    v = image.values.astype(np.float64)
    std = v.std()
    if std < 1e-6:
        return Grid2D(np.zeros_like(v, dtype=np.float32), spacing=image.spacing)
    out = (v - v.mean()) / std
    return Grid2D(out.astype(np.float32), spacing=image.spacing)


def explode_multilabel(sample: Sample) -> list[BinarySample]:
    """One BinarySample per nonzero label value present in the slice."""
    out = []
    image = normalize_intensities(sample.image)
    for value in np.unique(sample.label):
        if value == 0:
            continue
        gt = BinaryMask(sample.label == value)
        out.append(
            BinarySample(
                image=image,
                gt=gt,
                structure_id=int(value),
                case_id=sample.case_id,
                slice_index=sample.slice_index,
            )
        )
    return out


def explode_dataset(samples: list[Sample]) -> tuple[list[BinarySample], int]:
    """Explode all samples; returns (binary samples, count of skipped
    all-background slices)."""
    out: list[BinarySample] = []
    skipped = 0
    for s in samples:
        items = explode_multilabel(s)
        if not items:
            skipped += 1
        out.extend(items)
    if skipped:
        log.info("skipped %d slices with empty ground truth", skipped)
    return out, skipped


# ---------------------------------------------------------------------------
# synthetic phantom generator
# ---------------------------------------------------------------------------


def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(3 * sigma)))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(t * t) / (2 * sigma * sigma))
    k /= k.sum()
    padded = np.pad(img, radius, mode="reflect")
    tmp = np.apply_along_axis(lambda r: np.convolve(r, k, mode="valid"), 1, padded)
    return np.apply_along_axis(lambda c: np.convolve(c, k, mode="valid"), 0, tmp)


def _ellipse_mask(size: int, cx, cy, a, b, theta) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    dx, dy = xx - cx, yy - cy
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _make_structure(cls: str, size: int, rng: np.random.Generator) -> np.ndarray:
    cx = rng.uniform(0.18 * size, 0.82 * size)
    cy = rng.uniform(0.18 * size, 0.82 * size)
    if cls == "organ":
        a = rng.uniform(0.09, 0.19) * size
        b = rng.uniform(0.09, 0.19) * size
        return _ellipse_mask(size, cx, cy, a, b, rng.uniform(0, math.pi))
    if cls == "rim_organ":
        a = rng.uniform(0.11, 0.19) * size
        b = rng.uniform(0.11, 0.19) * size
        theta = rng.uniform(0, math.pi)
        outer = _ellipse_mask(size, cx, cy, a, b, theta)
        phi = rng.uniform(0, 2 * math.pi)
        shift = 0.55 * min(a, b)
        inner = _ellipse_mask(
            size, cx + shift * math.cos(phi), cy + shift * math.sin(phi), 0.8 * a, 0.8 * b, theta
        )
        return outer & ~inner
    if cls == "lesion":
        n_lobes = int(rng.integers(3, 7))
        mask = np.zeros((size, size), dtype=bool)
        spread = 0.05 * size
        for _ in range(n_lobes):
            lx = cx + rng.uniform(-spread, spread)
            ly = cy + rng.uniform(-spread, spread)
            r = rng.uniform(0.045, 0.085) * size
            mask |= _ellipse_mask(size, lx, ly, r, r, 0.0)
        return mask
    raise ValueError(f"unknown structure class {cls!r}")


def generate_synthetic(cfg: SyntheticConfig) -> list[Sample]:
    """Deterministic synthetic dataset: 1-3 non-overlapping structures over a
    textured background, with class-dependent intensity offsets."""
    rng = np.random.default_rng(cfg.seed)
    priors = np.asarray(cfg.class_priors, dtype=np.float64)
    priors = priors / priors.sum()
    samples = []
    for i in range(cfg.count):
        size = cfg.size
        n_structs = int(rng.integers(1, min(cfg.max_structures, len(cfg.classes)) + 1))
        # distinct classes per slice so each label value is one structure
        chosen = rng.choice(len(cfg.classes), size=n_structs, replace=False, p=priors)
        label = np.zeros((size, size), dtype=np.uint8)
        occupied = np.zeros((size, size), dtype=bool)
        offsets = np.zeros((size, size), dtype=np.float64)
        structures: dict[int, str] = {}
        for class_idx in chosen:
            cls = cfg.classes[int(class_idx)]
            cid = CLASS_IDS[cls]
            for _attempt in range(40):
                mask = _make_structure(cls, size, rng)
                if mask.sum() < _MIN_STRUCTURE_PIXELS:
                    continue
                # 1px margin between structures
                grown = mask.copy()
                grown[:-1] |= mask[1:]
                grown[1:] |= mask[:-1]
                grown[:, :-1] |= mask[:, 1:]
                grown[:, 1:] |= mask[:, :-1]
                if not (grown & occupied).any():
                    label[mask] = cid
                    occupied |= grown
                    offsets[mask] = _CLASS_OFFSET[cid] + rng.uniform(-0.1, 0.1)
                    structures[cid] = cls
                    break
        texture = _gaussian_blur(rng.standard_normal((size, size)), 3.0)
        texture *= cfg.texture_amplitude / max(texture.std(), 1e-9)
        img = _gaussian_blur(offsets, 0.6) + texture
        img += rng.normal(0.0, cfg.noise_amplitude, size=(size, size))
        case = f"case{i // cfg.slices_per_case:04d}"
        samples.append(
            Sample(
                image=Grid2D(img.astype(np.float32), spacing=cfg.spacing),
                label=label,
                spacing=cfg.spacing,
                case_id=case,
                slice_index=i % cfg.slices_per_case,
                structures=structures,
            )
        )
    return samples


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------


def write_sample(sample: Sample, dataset_root) -> Path:
    case_dir = Path(dataset_root) / sample.case_id
    case_dir.mkdir(parents=True, exist_ok=True)
    stem = case_dir / f"{sample.slice_index:04d}"
    img = sample.image.values.astype("<f4")
    lbl = sample.label.astype(np.uint8)
    stem.with_suffix(".img").write_bytes(img.tobytes())
    stem.with_suffix(".lbl").write_bytes(lbl.tobytes())
    sidecar = {
        "width": sample.image.width,
        "height": sample.image.height,
        "spacing_mm": [sample.spacing[0], sample.spacing[1]],
        "dtype": "float32",
        "structures": {str(k): v for k, v in sample.structures.items()},
        "case_id": sample.case_id,
        "slice_index": sample.slice_index,
    }
    stem.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))
    return stem


def read_sample(stem) -> Sample:
    """Read a sample given its path stem (or any of its three file paths)."""
    stem = Path(stem)
    if stem.suffix in (".img", ".lbl", ".json"):
        stem = stem.with_suffix("")
    sidecar_path = stem.with_suffix(".json")
    if not sidecar_path.exists():
        raise FileNotFoundError(f"missing metadata sidecar {sidecar_path}")
    meta = json.loads(sidecar_path.read_text())
    w, h = meta["width"], meta["height"]
    img = np.frombuffer(stem.with_suffix(".img").read_bytes(), dtype="<f4")
    lbl = np.frombuffer(stem.with_suffix(".lbl").read_bytes(), dtype=np.uint8)
    if img.size != w * h or lbl.size != w * h:
        raise ValueError(f"blob size mismatch for {stem} (expected {w}x{h})")
    spacing = tuple(meta["spacing_mm"])
    return Sample(
        image=Grid2D(img.reshape(h, w).astype(np.float32), spacing=spacing),
        label=lbl.reshape(h, w).copy(),
        spacing=spacing,
        case_id=meta["case_id"],
        slice_index=meta["slice_index"],
        structures={int(k): v for k, v in meta.get("structures", {}).items()},
    )


def write_dataset(
    samples: list[Sample],
    dataset_root,
    val_fraction: float = 0.1,
    n_folds: int = 5,
    seed: int = 0,
) -> Path:
    """Write samples plus a manifest with a case-level train/val split and folds."""
    root = Path(dataset_root)
    root.mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_sample(s, root)
    cases = sorted({s.case_id for s in samples})
    rng = np.random.default_rng(seed)
    order = [cases[i] for i in rng.permutation(len(cases))]
    n_val = max(1, int(round(val_fraction * len(cases)))) if len(cases) > 1 else 0
    folds = [sorted(order[i::n_folds]) for i in range(n_folds)]
    manifest = {
        "cases": cases,
        "splits": {"train": sorted(order[n_val:]), "val": sorted(order[:n_val])},
        "folds": folds,
        "seed": seed,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def load_manifest(dataset_root) -> dict:
    path = Path(dataset_root) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"missing manifest {path}")
    return json.loads(path.read_text())


def case_ids_for(manifest: dict, split: str | None, fold: int | None) -> list[str]:
    """Resolve a split name (train/val/all) or a fold index (fold k = val
    cases, the rest train) into case ids."""
    if fold is not None:
        folds = manifest["folds"]
        if not 0 <= fold < len(folds):
            raise ValueError(f"fold {fold} out of range (have {len(folds)})")
        if split == "val":
            return list(folds[fold])
        return sorted(c for i, f in enumerate(folds) if i != fold for c in f)
    if split in (None, "all"):
        return list(manifest["cases"])
    if split not in manifest["splits"]:
        raise ValueError(f"unknown split {split!r}")
    return list(manifest["splits"][split])


def load_dataset(dataset_root, split: str | None = None, fold: int | None = None) -> list[Sample]:
    root = Path(dataset_root)
    manifest = load_manifest(root)
    samples = []
    for case in case_ids_for(manifest, split, fold):
        case_dir = root / case
        for sidecar in sorted(case_dir.glob("*.json")):
            samples.append(read_sample(sidecar))
    return samples
