"""Synthetic hazy dataset generation, on-disk layout and manifests.

Manifest files are plain text. The first line is a header of ``key=value``
pairs (seed, ranges, split, count); every following line is one record::

    id,clear_path,depth_path,hazy_path,trans_path,A_r,A_g,A_b,beta

Paths are relative to the manifest's directory.
"""
from __future__ import annotations

import colorsys
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from . import formats
from .errors import FormatError, MissingFileError
from .physics import (
    A_RANGE,
    BETA_RANGE,
    HazeParams,
    SceneSample,
    depth_to_transmission,
    normalize_depth,
    sample_params,
    synthesize_hazy,
)

log = logging.getLogger(__name__)

MANIFEST_TAG = "hazeforge-manifest"


# -----------------------------------------------------------------------------
# scene sources
# -----------------------------------------------------------------------------
def _scene_color(rng: np.random.Generator) -> np.ndarray:
    """Moderately saturated color, like painted walls and furniture."""
    h = rng.uniform(0.0, 1.0)
    sat = rng.uniform(0.1, 0.55)
    val = rng.uniform(0.35, 0.95)
    return np.array(colorsys.hsv_to_rgb(h, sat, val))


def procedural_scene(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    """A random indoor-like scene: back wall, receding floor and textured boxes.

    Returns ``(J, d)`` with ``J`` of shape (3, size, size) in [0, 1] and depth
    (size, size) normalized to [0, 1]. Color and depth are drawn independently.
    """
    S = size
    yy, xx = np.mgrid[0:S, 0:S] / max(S - 1, 1)
    horizon = rng.uniform(0.45, 0.7)
    wall_depth = rng.uniform(0.85, 1.0)
    tilt = rng.uniform(-0.1, 0.1)
    d = np.where(
        yy < horizon,
        wall_depth + tilt * (xx - 0.5),
        wall_depth - (yy - horizon) / (1.0 - horizon) * rng.uniform(0.6, 0.8),
    )
    wall = _scene_color(rng)[:, None, None] * (0.8 + 0.2 * xx)[None]
    floor = _scene_color(rng)[:, None, None] * (0.6 + 0.4 * yy)[None]
    stripes = 0.5 + 0.5 * np.sign(np.sin(2 * np.pi * (xx * rng.integers(3, 9) + yy * rng.integers(0, 3))))
    floor = floor * (0.55 + 0.45 * stripes)[None]
    J = np.where((yy < horizon)[None], wall, floor)

    for _ in range(int(rng.integers(4, 10))):
        h, w = rng.uniform(0.1, 0.35, size=2)
        y0, x0 = rng.uniform(0.0, 1.0 - h), rng.uniform(0.0, 1.0 - w)
        box = (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
        # cast shadow to the lower right
        shadow = (yy >= y0 + 0.04) & (yy < y0 + h + 0.06) & (xx >= x0 + 0.04) & (xx < x0 + w + 0.06) & ~box
        J = np.where(shadow[None], J * 0.25, J)
        col = _scene_color(rng)
        kind = rng.integers(3)
        if kind == 0:
            tex = 0.5 + 0.5 * np.sign(np.sin(2 * np.pi * rng.integers(2, 7) * (xx - x0) / w))
        elif kind == 1:
            tex = (np.floor((xx - x0) / w * 4) + np.floor((yy - y0) / h * 4)) % 2
        else:
            tex = (yy - y0) / h
        shade = 0.15 + 0.85 * tex
        J = np.where(box[None], col[:, None, None] * shade[None], J)
        edge = box & ~((yy >= y0 + 0.02) & (yy < y0 + h - 0.02) & (xx >= x0 + 0.02) & (xx < x0 + w - 0.02))
        J = np.where(edge[None], 0.03, J)
        d = np.where(box, rng.uniform(0.15, 0.75) + 0.1 * (yy - y0), d)

    J = J * rng.uniform(0.9, 1.0, size=(1, S, S))
    J = np.clip(J, 0.0, 1.0)
    return J, normalize_depth(np.clip(d, 0.0, None))


def procedural_pairs(n: int, size: int, seed: int) -> list[tuple[str, np.ndarray, np.ndarray]]:
    rng = np.random.default_rng(seed)
    return [(f"scene{i:04d}", *procedural_scene(rng, size)) for i in range(n)]


def _resize(arr2d: np.ndarray, size: int) -> np.ndarray:
    if arr2d.shape == (size, size):
        return arr2d
    pil = Image.fromarray(np.asarray(arr2d, dtype=np.float32), mode="F")
    return np.asarray(pil.resize((size, size), Image.BILINEAR), dtype=np.float64)


def directory_pairs(src: Path, size: int) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """Clear/depth pairs from a folder: ``NAME.png`` with ``NAME_depth.htf`` or ``NAME_depth.png``."""
    src = Path(src)
    pairs = []
    for img_path in sorted(src.glob("*.png")):
        if img_path.stem.endswith("_depth"):
            continue
        htf = src / f"{img_path.stem}_depth.htf"
        png = src / f"{img_path.stem}_depth.png"
        if htf.exists():
            depth = formats.load_tensor(htf).astype(np.float64)
        elif png.exists():
            depth = formats.load_image(png, gray=True)
        else:
            raise MissingFileError(f"no depth map for {img_path.name}")
        J = formats.load_image(img_path)
        J = np.stack([_resize(c, size) for c in J])
        pairs.append((img_path.stem, np.clip(J, 0, 1), normalize_depth(_resize(depth, size))))
    if not pairs:
        raise MissingFileError(f"no clear/depth pairs found in {src}")
    return pairs


# -----------------------------------------------------------------------------
# sample generation
# -----------------------------------------------------------------------------
def generate_dataset(
    clear_depth_pairs: Sequence[tuple[str, np.ndarray, np.ndarray | None]],
    per_image_draws: int,
    A_range=A_RANGE,
    beta_range=BETA_RANGE,
    seed: int = 0,
    per_channel_A: bool = False,
) -> list[SceneSample]:
    """Draw ``per_image_draws`` independent (A, beta) hazings of every clear image."""
    if per_image_draws < 1:
        raise ValueError("per_image_draws must be >= 1")
    rng = np.random.default_rng(seed)
    samples = []
    for image_id, J, d in clear_depth_pairs:
        if d is None:
            raise MissingFileError(f"missing depth for image {image_id}")
        J = formats.to_uint8(J).astype(np.float64) / 255.0
        d = normalize_depth(d)
        for k in range(per_image_draws):
            params = sample_params(rng, A_range, beta_range, per_channel_A)
            t = depth_to_transmission(d, params.beta)
            I, clamped = synthesize_hazy(J, t, params.A)
            samples.append(SceneSample(id=f"{image_id}_h{k}", J=J, d=d, params=params, t=t, I=I, clamped=clamped, image_id=image_id))
    total = sum(s.clamped for s in samples)
    if total:
        log.info("clamped %d values to [0, 1] during synthesis", total)
    return samples


def split_by_image(samples: Sequence[SceneSample], test_fraction: float, seed: int) -> tuple[list[SceneSample], list[SceneSample]]:
    """Partition samples so that no clear image appears in both splits."""
    ids = sorted({s.image_id for s in samples})
    rng = np.random.default_rng(seed + 7919)
    n_test = max(1, int(round(test_fraction * len(ids)))) if test_fraction > 0 else 0
    test_ids = set(rng.permutation(ids)[:n_test].tolist())
    train = [s for s in samples if s.image_id not in test_ids]
    test = [s for s in samples if s.image_id in test_ids]
    return train, test


# -----------------------------------------------------------------------------
# manifests
# -----------------------------------------------------------------------------
@dataclass
class ManifestRecord:
    id: str
    clear_path: str
    depth_path: str
    hazy_path: str
    trans_path: str
    A: tuple[float, float, float]
    beta: float


@dataclass
class Manifest:
    header: dict[str, str]
    records: list[ManifestRecord]
    root: Path

    @property
    def split(self) -> str:
        return self.header.get("split", "")

    def __len__(self) -> int:
        return len(self.records)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_manifest(path: Path, header: dict, records: Iterable[ManifestRecord]) -> None:
    lines = [" ".join([MANIFEST_TAG] + [f"{k}={v}" for k, v in header.items()])]
    for r in records:
        lines.append(",".join([r.id, r.clear_path, r.depth_path, r.hazy_path, r.trans_path, *map(_fmt, r.A), _fmt(r.beta)]))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path: Path, check_paths: bool = True) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"manifest not found: {path}")
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith(MANIFEST_TAG):
        raise FormatError(f"{path}: missing manifest header")
    header = dict(tok.split("=", 1) for tok in lines[0].split()[1:])
    records, seen = [], set()
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 9:
            raise FormatError(f"{path}:{n}: expected 9 fields, got {len(parts)}")
        rid = parts[0]
        if rid in seen:
            raise FormatError(f"{path}:{n}: duplicate id {rid}")
        seen.add(rid)
        rec = ManifestRecord(rid, *parts[1:5], A=tuple(float(v) for v in parts[5:8]), beta=float(parts[8]))
        if check_paths:
            for p in (rec.clear_path, rec.depth_path, rec.hazy_path, rec.trans_path):
                if not (path.parent / p).exists():
                    raise MissingFileError(f"{path}:{n}: referenced file missing: {p}")
        records.append(rec)
    return Manifest(header=header, records=records, root=path.parent)


def resolve_manifest(path: Path, split: str) -> Path:
    """Accept either a manifest file or a dataset directory holding ``<split>.manifest``."""
    path = Path(path)
    return path / f"{split}.manifest" if path.is_dir() else path


def write_dataset(out_dir: Path, splits: dict[str, list[SceneSample]], header: dict) -> dict[str, Path]:
    """Write images, maps and one manifest per split. Returns manifest paths."""
    out_dir = Path(out_dir)
    written = {}
    for split, samples in splits.items():
        records = []
        for s in samples:
            clear = f"clear/{s.image_id}.png"
            depth = f"depth/{s.image_id}.htf"
            if not (out_dir / clear).exists():
                formats.save_image(s.J, out_dir / clear)
                formats.save_tensor(s.d, out_dir / depth)
            hazy, trans = f"hazy/{s.id}.png", f"trans/{s.id}.htf"
            formats.save_image(s.I, out_dir / hazy)
            formats.save_tensor(s.t, out_dir / trans)
            formats.save_image(s.t, out_dir / f"trans/{s.id}.png")
            A = np.asarray(s.params.A).reshape(3, -1).mean(axis=1)
            records.append(ManifestRecord(s.id, clear, depth, hazy, trans, tuple(A), s.params.beta))
        h = dict(header, split=split, count=len(records))
        path = out_dir / f"{split}.manifest"
        write_manifest(path, h, records)
        written[split] = path
    return written


@dataclass
class LoadedSplit:
    ids: list[str]
    hazy: np.ndarray  # (N, 3, H, W)
    clear: np.ndarray  # (N, 3, H, W)
    trans: np.ndarray  # (N, 1, H, W)
    A: np.ndarray  # (N, 3)
    beta: np.ndarray  # (N,)


def load_split(manifest: Manifest) -> LoadedSplit:
    root = manifest.root
    hazy, clear, trans = [], [], []
    for r in manifest.records:
        hazy.append(formats.load_image(root / r.hazy_path))
        clear.append(formats.load_image(root / r.clear_path))
        trans.append(formats.load_tensor(root / r.trans_path).astype(np.float64)[None])
    return LoadedSplit(
        ids=[r.id for r in manifest.records],
        hazy=np.stack(hazy),
        clear=np.stack(clear),
        trans=np.stack(trans),
        A=np.array([r.A for r in manifest.records]),
        beta=np.array([r.beta for r in manifest.records]),
    )


def params_of(record: ManifestRecord) -> HazeParams:
    return HazeParams(A=np.array(record.A), beta=record.beta)
