"""Procedural source/target segmentation scenes with a photometric domain gap.

Both domains share region layouts and class frequencies; the target applies
a per-channel gain and offset to the class palette and adds extra noise, so
ground-truth target labels stay valid for evaluation.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from duallevel.numerics import Rng, make_rng

LAYOUTS = ("voronoi", "stripes", "blobs")

DEFAULT_PALETTE = (
    (0.45, 0.45, 0.45),
    (0.25, 0.55, 0.25),
    (0.60, 0.40, 0.30),
    (0.40, 0.55, 0.75),
    (0.70, 0.30, 0.35),
)


def tail_profile(C: int, exponent: float) -> list[float]:
    """Long-tailed class weights ``(c + 1) ** -exponent``, normalized."""
    w = np.arange(1, C + 1, dtype=np.float64) ** -float(exponent)
    return (w / w.sum()).tolist()


@dataclass
class DomainSpec:
    class_count: int = 5
    palette: list = field(default_factory=lambda: [list(c) for c in DEFAULT_PALETTE])
    palette_std: list = field(default_factory=lambda: [[0.04, 0.04, 0.04] for _ in DEFAULT_PALETTE])
    region_jitter: float = 0.03
    shift_offset: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    shift_gain: list = field(default_factory=lambda: [1.0, 1.0, 1.0])
    noise_std: float = 0.02
    freq_profile: list = field(default_factory=lambda: tail_profile(5, 1.5))
    layout: str = "voronoi"
    n_regions: int = 24

    def __post_init__(self):
        C = self.class_count
        if C < 1:
            raise ValueError("class_count must be >= 1")
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown layout {self.layout!r}")
        pal = np.asarray(self.palette, dtype=np.float64)
        std = np.asarray(self.palette_std, dtype=np.float64)
        if pal.shape != (C, 3) or std.shape != (C, 3):
            raise ValueError("palette and palette_std must be (C, 3)")
        if np.any(pal < 0) or np.any(pal > 1):
            raise ValueError("palette means must lie in [0, 1]")
        if np.any(std < 0) or self.noise_std < 0 or self.region_jitter < 0:
            raise ValueError("standard deviations must be non-negative")
        if len(self.shift_offset) != 3 or len(self.shift_gain) != 3:
            raise ValueError("shift_offset and shift_gain must have 3 channels")
        freq = np.asarray(self.freq_profile, dtype=np.float64)
        if freq.shape != (C,) or np.any(freq < 0) or freq.sum() <= 0:
            raise ValueError("freq_profile must hold C non-negative weights with positive sum")
        self.freq_profile = (freq / freq.sum()).tolist()
        if self.n_regions < 1:
            raise ValueError("n_regions must be >= 1")

    @classmethod
    def long_tailed(cls, C: int = 5, exponent: float = 1.5, **kw) -> DomainSpec:
        pal = kw.pop("palette", None)
        if pal is None:
            rng = make_rng(0, "palette")
            base = [list(c) for c in DEFAULT_PALETTE]
            while len(base) < C:
                base.append(rng.uniform(0.2, 0.8, 3).round(3).tolist())
            pal = base[:C]
        kw.setdefault("palette_std", [[0.04] * 3 for _ in range(C)])
        return cls(class_count=C, palette=pal, freq_profile=tail_profile(C, exponent), **kw)

    def shifted(self, offset, gain, noise_std: float | None = None) -> DomainSpec:
        return replace(
            self,
            shift_offset=list(offset),
            shift_gain=list(gain),
            noise_std=self.noise_std if noise_std is None else noise_std,
        )


@dataclass
class LabeledImage:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    labels: np.ndarray  # (H, W) int64


def _layout_regions(spec: DomainSpec, rng: Rng, H: int, W: int) -> tuple[np.ndarray, int]:
    """Region index per pixel and the region count."""
    ii, jj = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    if spec.layout == "voronoi":
        n = spec.n_regions
        seeds = rng.uniform(0, 1, (n, 2)) * [H, W]
        d = (ii[..., None] - seeds[:, 0]) ** 2 + (jj[..., None] - seeds[:, 1]) ** 2
        return np.argmin(d, axis=2), n
    if spec.layout == "stripes":
        n = spec.n_regions
        theta = rng.uniform(0, np.pi)
        proj = ii * np.cos(theta) + jj * np.sin(theta)
        cuts = np.sort(rng.uniform(proj.min(), proj.max(), n - 1))
        return np.searchsorted(cuts, proj, side="right"), n
    # blobs: background region 0, then discs painted in order
    region = np.zeros((H, W), dtype=np.int64)
    n = spec.n_regions
    for r in range(1, n):
        ci, cj = rng.uniform(0, H), rng.uniform(0, W)
        rad = rng.uniform(0.08, 0.25) * min(H, W)
        region[(ii - ci) ** 2 + (jj - cj) ** 2 <= rad**2] = r
    return region, n


def gen_scene(spec: DomainSpec, rng: Rng, H: int = 64, W: int = 64) -> LabeledImage:
    """Sample one labeled scene.

    Regions get classes drawn from ``freq_profile``; each region adds a
    small color jitter to its class mean, pixels add the class spread, then
    the domain gain/offset and sensor noise are applied.
    """
    if H < 8 or W < 8:
        raise ValueError("scenes must be at least 8x8")
    region, n = _layout_regions(spec, rng, H, W)
    classes = rng.choice(spec.class_count, size=n, p=np.asarray(spec.freq_profile))
    jitter = rng.normal(0.0, 1.0, (n, 3)) * spec.region_jitter
    labels = classes[region].astype(np.int64)
    pal = np.asarray(spec.palette)
    std = np.asarray(spec.palette_std)
    pix = pal[labels] + jitter[region] + rng.normal(0.0, 1.0, (H, W, 3)) * std[labels]
    img = pix * np.asarray(spec.shift_gain) + np.asarray(spec.shift_offset)
    img = img + rng.normal(0.0, 1.0, (H, W, 3)) * spec.noise_std
    return LabeledImage(np.clip(img, 0.0, 1.0), labels)


def check_pair(source: DomainSpec, target: DomainSpec) -> None:
    """Target may differ from source only in shift and noise."""
    for name in ("class_count", "palette", "palette_std", "region_jitter", "freq_profile", "layout", "n_regions"):
        if getattr(source, name) != getattr(target, name):
            raise ValueError(f"target spec must share {name} with the source")


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, 3) float64
    labels: np.ndarray  # (N, H, W) int64

    def __len__(self):
        return len(self.images)

    def __getitem__(self, j) -> LabeledImage:
        return LabeledImage(self.images[j], self.labels[j])


def _gen_split(spec: DomainSpec, n: int, seed: int, split: str, H: int, W: int) -> Dataset:
    imgs = np.zeros((n, H, W, 3))
    labs = np.zeros((n, H, W), dtype=np.int64)
    for j in range(n):
        scene = gen_scene(spec, make_rng(seed, split, j), H, W)
        # round through f32 so in-memory data equals what save/load returns
        imgs[j] = scene.image.astype(np.float32)
        labs[j] = scene.labels
    return Dataset(imgs, labs)


def gen_dataset(source_spec: DomainSpec, target_spec: DomainSpec, n_source: int, n_target: int, seed: int, H: int = 64, W: int = 64):
    """Build a paired benchmark; every image gets its own derived seed.

    Returns ``(source, target, manifest)``.
    """
    check_pair(source_spec, target_spec)
    source = _gen_split(source_spec, n_source, seed, "source", H, W)
    target = _gen_split(target_spec, n_target, seed, "target", H, W)
    manifest = {
        "format": "duallevel-dataset",
        "version": 1,
        "seed": int(seed),
        "height": H,
        "width": W,
        "splits": {
            "source": {"count": n_source, "spec": asdict(source_spec)},
            "target": {"count": n_target, "spec": asdict(target_spec)},
        },
        "image_dtype": "<f4",
        "label_dtype": "u1",
        "per_image_seed": "make_rng(seed, split, index)",
    }
    return source, target, manifest


def class_frequencies(labels: np.ndarray, C: int) -> np.ndarray:
    counts = np.bincount(np.asarray(labels).ravel(), minlength=C).astype(np.float64)
    return counts / max(counts.sum(), 1.0)


def save_dataset(out_dir, source: Dataset, target: Dataset, manifest: dict) -> None:
    """One directory per split with flat ``images.bin`` (f32) and ``labels.bin`` (u8)."""
    out = Path(out_dir)
    for name, ds in (("source", source), ("target", target)):
        d = out / name
        d.mkdir(parents=True, exist_ok=True)
        (d / "images.bin").write_bytes(ds.images.astype("<f4").tobytes())
        (d / "labels.bin").write_bytes(ds.labels.astype("u1").tobytes())
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(in_dir) -> tuple[Dataset, Dataset, dict]:
    root = Path(in_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    H, W = manifest["height"], manifest["width"]
    splits = []
    for name in ("source", "target"):
        n = manifest["splits"][name]["count"]
        imgs = np.frombuffer((root / name / "images.bin").read_bytes(), "<f4")
        labs = np.frombuffer((root / name / "labels.bin").read_bytes(), "u1")
        if imgs.size != n * H * W * 3 or labs.size != n * H * W:
            raise ValueError(f"{name} split size does not match the manifest")
        splits.append(Dataset(imgs.astype(np.float64).reshape(n, H, W, 3), labs.astype(np.int64).reshape(n, H, W)))
    return splits[0], splits[1], manifest
