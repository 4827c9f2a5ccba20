"""End-to-end steps shared by the command line and the acceptance suite."""
from __future__ import annotations

import logging
import os
from pathlib import Path

import numpy as np

from . import formats, plotting
from .config import RunConfig
from .dataset import (
    LoadedSplit,
    directory_pairs,
    generate_dataset,
    load_split,
    procedural_pairs,
    read_manifest,
    resolve_manifest,
    split_by_image,
    write_dataset,
)
from .errors import ConfigError
from .evaluation import infer, load_model, run_ablation_grid
from .losses import DEHAZING_PRESETS
from .physics import SceneSample
from .training import train_stage1, train_stage2

log = logging.getLogger(__name__)

THREADS_ENV = "HAZEFORGE_THREADS"


def thread_limit() -> int:
    """Worker cap from the environment; 0 means serial."""
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return 0
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    if n < 0:
        raise ConfigError(f"{THREADS_ENV} must be >= 0")
    return n


# -----------------------------------------------------------------------------
# data
# -----------------------------------------------------------------------------
def make_samples(config: RunConfig) -> tuple[list[SceneSample], list[SceneSample]]:
    c = config
    if c.source == "procedural":
        pairs = procedural_pairs(c.n_images, c.image_size, c.seed)
    else:
        pairs = directory_pairs(Path(c.source), c.image_size)
    samples = generate_dataset(pairs, c.draws, c.A_range, c.beta_range, seed=c.seed, per_channel_A=c.per_channel_A)
    return split_by_image(samples, c.test_fraction, c.seed)


def to_split(samples: list[SceneSample]) -> LoadedSplit:
    """In-memory split with the same 8-bit hazy quantization as the files ``synth`` writes."""
    q = lambda a: formats.to_uint8(a).astype(np.float64) / 255.0  # noqa: E731
    return LoadedSplit(
        ids=[s.id for s in samples],
        hazy=np.stack([q(s.I) for s in samples]),
        clear=np.stack([s.J for s in samples]),
        trans=np.stack([s.t[None] for s in samples]),
        A=np.stack([np.asarray(s.params.A).reshape(3, -1).mean(axis=1) for s in samples]),
        beta=np.array([s.params.beta for s in samples]),
    )


def synthesize(config: RunConfig, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    train, test = make_samples(config)
    header = {
        "seed": config.seed,
        "A": f"{config.A_min}:{config.A_max}",
        "beta": f"{config.beta_min}:{config.beta_max}",
        "draws": config.draws,
        "size": config.image_size,
    }
    written = write_dataset(out, {"train": train, "test": test}, header)
    config.save(out / "config.ini")
    return written


def load_data(data_dir, split: str) -> LoadedSplit:
    return load_split(read_manifest(resolve_manifest(Path(data_dir), split)))


# -----------------------------------------------------------------------------
# training
# -----------------------------------------------------------------------------
def train(config: RunConfig, stage: str, data_dir, out_dir) -> dict[str, Path]:
    """Run stage ``1``, ``2`` or ``both`` and write checkpoints, loss CSVs and a loss plot.

    Stage 2 alone resumes from ``out_dir/stage1.htfa`` when the preset uses
    the transmission branch.
    """
    if stage not in ("1", "2", "both"):
        raise ConfigError(f"stage must be 1, 2 or both, got {stage!r}")
    if stage == "2" and config.preset not in DEHAZING_PRESETS:
        raise ConfigError(f"preset {config.preset} trains the transmission branch only; use --stage 1")
    out = Path(out_dir)
    data = load_data(data_dir, "train")
    w = config.weights
    written: dict[str, Path] = {}
    config.save(out / "config.ini")
    if stage in ("1", "both") and w.enable_transmission_branch:
        written["stage1"] = train_stage1(config, data, out)
    if stage in ("2", "both") and config.preset in DEHAZING_PRESETS:
        s1 = None
        if w.enable_transmission_branch:
            s1 = out / "stage1.htfa"
            if not s1.exists():
                raise ConfigError(f"stage 2 of {config.preset} needs {s1}; run stage 1 first")
        written["stage2"] = train_stage2(config, data, s1, out)
    curves = [out / f"stage{k}_loss.csv" for k in (1, 2) if f"stage{k}" in written]
    if curves:
        written["plot"] = plotting.plot_loss_curves(curves, out / "loss_curves.png", title=config.preset)
    return written


def ablate(config: RunConfig, data_dir, out_dir):
    return run_ablation_grid(config, load_data(data_dir, "train"), load_data(data_dir, "test"), out_dir)


# -----------------------------------------------------------------------------
# single-image inference
# -----------------------------------------------------------------------------
def dehaze_file(checkpoint, image_path, out_path, transmission_path=None) -> None:
    model = load_model(checkpoint)
    if not model.dehazes:
        raise ConfigError(f"{checkpoint} is a stage-1 checkpoint and cannot dehaze")
    hazy = formats.load_image(image_path)
    t, J = infer(model, hazy[None])
    formats.save_image(J[0], out_path)
    if transmission_path is not None:
        if t is None:
            raise ConfigError(f"preset {model.config.preset} produces no transmission map")
        tp = Path(transmission_path)
        if tp.suffix.lower() == ".png":
            formats.save_image(t[0, 0], tp)
        else:
            formats.save_tensor(t[0, 0], tp)

