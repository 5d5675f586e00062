"""Synthetic single-object scenes with exact masks and paired prompts.

Every sample draws from its own Philox stream keyed by ``(seed, index)``,
so samples can be produced in any order or in parallel with identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .numerics.bundle import canonical_json, load_bundle, save_bundle, write_bytes_atomic
from .numerics.tensor import FormatError
from .prompts import Box, Point

GENERATOR_VERSION = "synthshapes-1"
SAMPLE_FORMAT = 1
SHAPES = ("ellipse", "rectangle", "triangle")
MAX_ATTEMPTS = 100
MIN_MASK_PIXELS = 16
MAX_MASK_FRACTION = 0.6


@dataclass(frozen=True)
class DataConfig:
    image_size: int = 64
    min_size: float = 0.12
    max_size: float = 0.40
    min_contrast: float = 0.3
    noise: float = 0.05


@dataclass
class Sample:
    id: str
    image: np.ndarray  # (1, H, W) in [0, 1]
    gt_mask: np.ndarray  # (H, W) of 0.0 / 1.0
    point_prompt: Point
    box_prompt: Box
    shape: str = ""  # shape class, informational

    def prompt(self, kind: str):
        return self.point_prompt if kind == "point" else self.box_prompt


def sample_id(seed: int, index: int) -> str:
    return f"s{seed}-{index:05d}"


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))


def rasterize(shape: str, cx, cy, size, aspect, angle, image_size: int, jitter=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Boolean mask of pixels whose centers fall inside the shape."""
    ys, xs = np.mgrid[0:image_size, 0:image_size] + 0.5
    dx, dy = xs - cx, ys - cy
    cos, sin = math.cos(angle), math.sin(angle)
    u, v = cos * dx + sin * dy, -sin * dx + cos * dy
    if shape == "ellipse":
        a, b = size / 2.0, size * aspect / 2.0
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    if shape == "rectangle":
        return (np.abs(u) <= size / 2.0) & (np.abs(v) <= size * aspect / 2.0)
    if shape == "triangle":
        r = size / 2.0
        verts = [(r * math.cos(angle + 2 * math.pi * k / 3 + jitter[k]),
                  r * math.sin(angle + 2 * math.pi * k / 3 + jitter[k])) for k in range(3)]
        inside = np.ones_like(dx, dtype=bool)
        area = 0.0
        for k in range(3):
            (x0, y0), (x1, y1) = verts[k], verts[(k + 1) % 3]
            area += x0 * y1 - x1 * y0
        orient = 1.0 if area > 0 else -1.0
        for k in range(3):
            (x0, y0), (x1, y1) = verts[k], verts[(k + 1) % 3]
            inside &= orient * ((x1 - x0) * (dy - y0) - (y1 - y0) * (dx - x0)) >= 0
        return inside
    raise ValueError(f"unknown shape {shape!r}")


def erode(mask: np.ndarray) -> np.ndarray:
    """3x3 binary erosion; pixels outside the image count as background."""
    padded = np.pad(mask, 1, constant_values=False)
    out = np.ones_like(mask, dtype=bool)
    h, w = mask.shape
    for oy in range(3):
        for ox in range(3):
            out &= padded[oy:oy + h, ox:ox + w]
    return out


def tight_box(mask: np.ndarray) -> Box:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return Box(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def check_sample(s: Sample) -> None:
    h, w = s.gt_mask.shape
    count = int(s.gt_mask.sum())
    if count < MIN_MASK_PIXELS or count > MAX_MASK_FRACTION * h * w:
        raise ValueError(f"{s.id}: mask has {count} pixels")
    if s.gt_mask[s.point_prompt.y, s.point_prompt.x] != 1:
        raise ValueError(f"{s.id}: point prompt outside mask")
    if s.box_prompt != tight_box(s.gt_mask > 0):
        raise ValueError(f"{s.id}: box prompt is not the tight bounding box")
    if s.image.min() < 0 or s.image.max() > 1:
        raise ValueError(f"{s.id}: image outside [0, 1]")


def generate_sample(seed: int, index: int, config: DataConfig = DataConfig()) -> Sample:
    rng = sample_rng(seed, index)
    side = config.image_size
    for _ in range(MAX_ATTEMPTS):
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        size = rng.uniform(config.min_size, config.max_size) * side
        aspect = rng.uniform(0.5, 1.0)
        angle = rng.uniform(0.0, math.pi)
        jitter = tuple(rng.uniform(-0.35, 0.35, size=3))
        reach = size / 2.0 * (math.hypot(1.0, aspect) if shape == "rectangle" else 1.0)
        lo, hi = reach + 1.0, side - reach - 1.0
        cx, cy = rng.uniform(lo, hi), rng.uniform(lo, hi)
        while True:
            fg, bg = rng.uniform(0.0, 1.0, size=2)
            if abs(fg - bg) >= config.min_contrast:
                break
        mask = rasterize(shape, cx, cy, size, aspect, angle, side, jitter)
        texture = rng.uniform(-config.noise, config.noise, size=(side, side))
        count = int(mask.sum())
        if count < MIN_MASK_PIXELS or count > MAX_MASK_FRACTION * side * side:
            continue
        interior = np.argwhere(erode(mask))
        if len(interior) == 0:
            continue
        py, px = interior[int(rng.integers(len(interior)))]
        image = np.clip(np.where(mask, fg, bg) + texture, 0.0, 1.0)
        sample = Sample(
            id=sample_id(seed, index),
            image=image[None].astype(np.float64),
            gt_mask=mask.astype(np.float64),
            point_prompt=Point(int(px), int(py)),
            box_prompt=tight_box(mask),
            shape=shape,
        )
        check_sample(sample)
        return sample
    raise RuntimeError(f"sample {sample_id(seed, index)}: no valid shape after {MAX_ATTEMPTS} attempts")


# ---------------------------------------------------------------- files

def sample_meta(s: Sample, **extra) -> dict:
    meta = {"kind": "sample", "sample_format": SAMPLE_FORMAT, "id": s.id,
            "point": s.point_prompt.to_list(), "box": s.box_prompt.to_list(), "shape": s.shape}
    meta.update(extra)
    return meta


def save_sample(path, s: Sample, **extra) -> None:
    save_bundle(path, sample_meta(s, **extra), {"image": s.image, "gt_mask": s.gt_mask})


def load_sample_with_meta(path) -> tuple[Sample, dict]:
    meta, tensors = load_bundle(path)
    if meta.get("kind") != "sample":
        raise FormatError(f"{path}: not a sample file (kind={meta.get('kind')!r})")
    if meta.get("sample_format") != SAMPLE_FORMAT:
        raise FormatError(f"{path}: sample format {meta.get('sample_format')} != {SAMPLE_FORMAT}")
    for key in ("image", "gt_mask"):
        if key not in tensors:
            raise FormatError(f"{path}: missing tensor {key!r}")
    image, mask = tensors["image"], tensors["gt_mask"]
    if image.ndim != 3 or image.shape[0] != 1 or mask.shape != image.shape[1:]:
        raise FormatError(f"{path}: inconsistent field 'shape': image {image.shape}, gt_mask {mask.shape}")
    try:
        sample = Sample(meta["id"], image, mask, Point(*meta["point"]), Box(*meta["box"]), meta.get("shape", ""))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad metadata record: {exc}") from None
    h, w = mask.shape
    sample.point_prompt.check(h, w)
    sample.box_prompt.check(h, w)
    return sample, meta


def load_sample(path) -> Sample:
    return load_sample_with_meta(path)[0]


def split_counts(n: int) -> int:
    """Number of training samples: 70% of ``n`` rounded half up."""
    return (7 * n + 5) // 10


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def generate_dataset(out_dir, seed: int, n: int, config: DataConfig = DataConfig(), workers: int = 1) -> dict:
    """Write ``n`` samples and ``manifest.json`` under ``out_dir``; return the manifest."""
    if n < 10:
        raise ValueError("generate_dataset needs n >= 10")
    out_dir = Path(out_dir)
    (out_dir / "samples").mkdir(parents=True, exist_ok=True)
    order = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed]))).permutation(n)
    train = set(order[: split_counts(n)].tolist())
    settings = {"generator_version": GENERATOR_VERSION, "seed": seed, "n": n, "config": asdict(config)}
    chash = config_hash(settings)

    def build(index: int):
        s = generate_sample(seed, index, config)
        rel = f"samples/{s.id}.smp"
        save_sample(out_dir / rel, s, seed=seed, config_hash=chash)
        return {"id": s.id, "file": rel, "split": "train" if index in train else "val"}

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            entries = list(pool.map(build, range(n)))
    else:
        entries = [build(i) for i in range(n)]
    manifest = dict(settings, config_hash=chash, data_hash=chash, samples=entries)
    write_bytes_atomic(out_dir / "manifest.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return manifest


def load_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"missing dataset manifest: {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("generator_version") != GENERATOR_VERSION:
        raise FormatError(f"{path}: generator version {manifest.get('generator_version')!r} unsupported")
    return manifest


def load_split(data_dir, split: str | None = None) -> list[Sample]:
    """Samples of ``split`` ("train", "val" or None for all) in manifest order."""
    manifest = load_manifest(data_dir)
    return [load_sample(Path(data_dir) / e["file"]) for e in manifest["samples"]
            if split is None or e["split"] == split]
