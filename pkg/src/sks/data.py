"""Synthetic lesion dataset, CT volume preprocessing and dataset storage.

Directory layout::

    dataset/manifest.json          schema_version, config echo, [{id, split, coarse_label}]
    dataset/{id}.img.skst          [H, W, 3] image in [0, 1]
    dataset/{id}.mask.skst         [H, W] binary lesion mask
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .io import load_tensor, save_tensor

SCHEMA_VERSION = 1
HU_WINDOW = (-200.0, 200.0)


@dataclass
class Sample:
    id: str
    image: np.ndarray          # [H, W, 3], values in [0, 1]
    fine_mask: np.ndarray      # [H, W] in {0, 1}
    coarse_label: int

    def validate(self) -> None:
        if self.image.ndim != 3 or self.image.shape[-1] != 3:
            raise ValueError(f"{self.id}: image must be [H, W, 3], got {self.image.shape}")
        if self.fine_mask.shape != self.image.shape[:2]:
            raise ValueError(f"{self.id}: mask {self.fine_mask.shape} does not match image {self.image.shape}")
        if not np.all((self.fine_mask == 0) | (self.fine_mask == 1)):
            raise ValueError(f"{self.id}: mask is not binary")
        if self.coarse_label != coarse_label(self.fine_mask):
            raise ValueError(f"{self.id}: coarse label {self.coarse_label} disagrees with its mask")


# --- CT preprocessing ---------------------------------------------------------


def hu_window(volume, low: float = HU_WINDOW[0], high: float = HU_WINDOW[1]) -> np.ndarray:
    """Clamp Hounsfield units to [low, high] and map linearly onto [0, 1]."""
    v = np.asarray(volume, dtype=np.float64)
    return (np.clip(v, low, high) - low) / (high - low)


def stack_adjacent(volume: np.ndarray, index: int) -> np.ndarray:
    """[S, H, W] volume -> [H, W, 3] image of slices (i-1, i, i+1); edges replicate."""
    n = volume.shape[0]
    if not 0 <= index < n:
        raise IndexError(f"slice index {index} out of range for {n} slices")
    picks = [max(index - 1, 0), index, min(index + 1, n - 1)]
    return np.stack([volume[i] for i in picks], axis=-1)


def coarse_label(mask) -> int:
    return int(np.any(np.asarray(mask) != 0))


@dataclass
class VolumeMeta:
    dims: tuple[int, int, int]           # slices, H, W
    dtype: str = "<i2"
    spacing: tuple[float, float, float] | None = None

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or min(self.dims) <= 0:
            raise ValueError(f"volume dims must be 3 positive extents, got {self.dims}")

    @property
    def nbytes(self) -> int:
        return int(np.prod(self.dims)) * np.dtype(self.dtype).itemsize


def read_raw_volume(path, meta: VolumeMeta) -> np.ndarray:
    """Headerless row-major raw scalars, e.g. int16 Hounsfield units."""
    blob = Path(path).read_bytes()
    if len(blob) != meta.nbytes:
        raise ValueError(f"{path}: expected {meta.nbytes} bytes for {meta.dims} {meta.dtype}, got {len(blob)}")
    return np.frombuffer(blob, dtype=meta.dtype).reshape(meta.dims)


def volume_to_samples(volume_id: str, hu_volume: np.ndarray, mask_volume: np.ndarray,
                      lesion_label: int | None = None) -> list[Sample]:
    """Window a HU volume and emit one 2.5D sample per slice.

    ``lesion_label`` selects one label value of a multi-label mask as foreground;
    by default any nonzero voxel is lesion.
    """
    if hu_volume.shape != mask_volume.shape:
        raise ValueError(f"volume {hu_volume.shape} and mask {mask_volume.shape} differ")
    windowed = hu_window(hu_volume)
    fg = mask_volume == lesion_label if lesion_label is not None else mask_volume != 0
    out = []
    for i in range(windowed.shape[0]):
        m = fg[i].astype(np.float32)
        s = Sample(f"{volume_id}_{i:04d}", stack_adjacent(windowed, i).astype(np.float32), m, coarse_label(m))
        s.validate()
        out.append(s)
    return out


def ingest_volume(volume_path, mask_path, volume_id: str, lesion_label: int | None = None) -> list[Sample]:
    """Read a HU volume and its mask, both [S, H, W] SKST files."""
    return volume_to_samples(volume_id, load_tensor(volume_path), load_tensor(mask_path), lesion_label)


# --- synthetic data -----------------------------------------------------------


@dataclass
class SyntheticConfig:
    image_size: int = 64
    num_samples: int = 64
    val_samples: int = 0
    lesion_probability: float = 0.5
    radius_min: float = 5.0
    radius_max: float = 12.0
    intensity_offset: float = 0.5
    noise_sigma: float = 0.03
    background_level: float = 0.3
    background_sigma: float = 0.05
    edge_blur: float = 1.0
    seed: int = 0
    output: str = "dataset"

    def validate(self) -> None:
        if not 0.0 <= self.lesion_probability <= 1.0:
            raise ValueError("lesion_probability must lie in [0, 1]")
        if not 0 < self.radius_min <= self.radius_max:
            raise ValueError(f"invalid radius range [{self.radius_min}, {self.radius_max}]")
        if 2 * self.radius_max >= self.image_size:
            raise ValueError(f"radius_max {self.radius_max} does not fit a {self.image_size}px image")
        if not 0 <= self.val_samples <= self.num_samples:
            raise ValueError("val_samples must lie in [0, num_samples]")

    def to_dict(self) -> dict:
        return asdict(self)


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index)])))


def _ellipse(size: int, cy, cx, ry, rx, theta, scale: float = 1.0) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (c * dx + s * dy) / (rx * scale)
    v = (-s * dx + c * dy) / (ry * scale)
    return (u * u + v * v) <= 1.0


def synth_sample(cfg: SyntheticConfig, index: int) -> Sample:
    """One sample, a pure function of (cfg, index)."""
    rng = _sample_rng(cfg.seed, index)
    n = cfg.image_size
    smooth = gaussian_filter(rng.standard_normal((n, n)), sigma=n / 8, mode="wrap")
    smooth = (smooth - smooth.mean()) / (smooth.std() + 1e-12)
    background = cfg.background_level + cfg.background_sigma * smooth
    has_lesion = rng.random() < cfg.lesion_probability
    mask = np.zeros((n, n), dtype=bool)
    adjacent = np.zeros((n, n), dtype=bool)
    if has_lesion:
        for _ in range(int(rng.integers(1, 4))):
            ry, rx = rng.uniform(cfg.radius_min, cfg.radius_max, size=2)
            r = max(ry, rx)
            cy, cx = rng.uniform(r, n - 1 - r, size=2)
            theta = rng.uniform(0, np.pi)
            mask |= _ellipse(n, cy, cx, ry, rx, theta)
            adjacent |= _ellipse(n, cy, cx, ry, rx, theta, scale=0.85)
    channels = []
    for lesion in (adjacent, mask, adjacent):
        stamp = gaussian_filter(lesion.astype(np.float64), sigma=cfg.edge_blur) if cfg.edge_blur > 0 else lesion
        img = background + cfg.intensity_offset * stamp + cfg.noise_sigma * rng.standard_normal((n, n))
        channels.append(np.clip(img, 0.0, 1.0))
    m = mask.astype(np.float32)
    return Sample(f"synth_{index:05d}", np.stack(channels, axis=-1).astype(np.float32), m, coarse_label(m))


def synth_generate(cfg: SyntheticConfig) -> list[Sample]:
    cfg.validate()
    return [synth_sample(cfg, i) for i in range(cfg.num_samples)]


def assign_splits(ids: list[str], val_count: int, seed: int) -> dict[str, str]:
    """Seeded split: ``val_count`` ids go to "val", the rest to "train"."""
    order = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 0x5EED]))).permutation(len(ids))
    val = {ids[i] for i in order[:val_count]}
    return {i: ("val" if i in val else "train") for i in ids}


# --- storage ------------------------------------------------------------------


@dataclass
class Dataset:
    root: Path
    samples: list[Sample]
    splits: dict[str, str]
    config: dict = field(default_factory=dict)

    def split(self, name: str) -> list[Sample]:
        if name == "all":
            return list(self.samples)
        return [s for s in self.samples if self.splits[s.id] == name]


def save_dataset(root, samples: list[Sample], splits: dict[str, str], config: dict | None = None) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        s.validate()
        save_tensor(root / f"{s.id}.img.skst", s.image.astype(np.float32), name=f"{s.id}.img")
        save_tensor(root / f"{s.id}.mask.skst", s.fine_mask.astype(np.float32), name=f"{s.id}.mask")
        entries.append({"id": s.id, "split": splits[s.id], "coarse_label": s.coarse_label})
    manifest = {"schema_version": SCHEMA_VERSION, "config": config or {}, "samples": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def load_dataset(root) -> Dataset:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported manifest schema {manifest.get('schema_version')}")
    samples, splits = [], {}
    for entry in manifest["samples"]:
        sid = entry["id"]
        s = Sample(sid, load_tensor(root / f"{sid}.img.skst"), load_tensor(root / f"{sid}.mask.skst"),
                   int(entry["coarse_label"]))
        s.validate()
        samples.append(s)
        splits[sid] = entry["split"]
    return Dataset(root, samples, splits, manifest.get("config", {}))


def generate_dataset(cfg: SyntheticConfig, root=None) -> Dataset:
    samples = synth_generate(cfg)
    splits = assign_splits([s.id for s in samples], cfg.val_samples, cfg.seed)
    root = Path(root if root is not None else cfg.output)
    save_dataset(root, samples, splits, cfg.to_dict())
    return Dataset(root, samples, splits, cfg.to_dict())


def stack_samples(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.fine_mask for s in samples])
    labels = np.array([s.coarse_label for s in samples], dtype=np.int64)
    return images, masks, labels
