"""Inference, SSIM reports and the ablation grid."""
from __future__ import annotations

import csv
import hashlib
import logging
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import plotting
from .config import RunConfig, parse_config
from .dataset import LoadedSplit, load_split, read_manifest, resolve_manifest
from .errors import ConfigError, FormatError
from .losses import DEHAZING_PRESETS, TRANSMISSION_PRESETS
from .metrics import dcp_estimate, ssim
from .networks import NetworkState, from_unit, load_networks, to_unit
from .tensor import Tensor, no_grad
from .training import Trainer, smoothed_drop, train_stage1, train_stage2

log = logging.getLogger(__name__)


# -----------------------------------------------------------------------------
# inference
# -----------------------------------------------------------------------------
@dataclass
class Model:
    G: NetworkState
    E: NetworkState
    config: RunConfig
    stage: int

    @property
    def uses_transmission(self) -> bool:
        return self.config.weights.enable_transmission_branch

    @property
    def dehazes(self) -> bool:
        return self.stage >= 2


def load_model(checkpoint) -> Model:
    nets, _, side = load_networks(checkpoint)
    try:
        cfg = parse_config(side["config"])
    except KeyError as exc:
        raise FormatError(f"{checkpoint}: sidecar lacks a config") from exc
    return Model(nets["G"], nets["E"], cfg, int(side.get("stage", 1)))


def _pad_to(x: np.ndarray, m: int) -> tuple[np.ndarray, tuple[int, int]]:
    H, W = x.shape[-2:]
    ph, pw = (-H) % m, (-W) % m
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    return x, (H, W)


def infer(model: Model, hazy: np.ndarray) -> tuple[np.ndarray | None, np.ndarray | None]:
    """Run the networks on (N, 3, H, W) hazy images in [0, 1].

    Returns ``(t, J)``; either is ``None`` when the checkpoint does not
    produce it (stage-1 checkpoints have no trained dehazer, the no-transmission
    preset has no transmission estimate).
    """
    x_np, (H, W) = _pad_to(from_unit(np.asarray(hazy, dtype=np.float64)), 2**model.G.depth)
    with no_grad():
        x = Tensor(x_np)
        t = None
        if model.uses_transmission:
            t = to_unit(model.G(x, mode="eval"))
            guide = t
        else:
            guide = Tensor(np.full((x_np.shape[0], 1) + x_np.shape[2:], Trainer.NO_T_FILL))
        J = to_unit(model.E(x, mode="eval", t=guide)) if model.dehazes else None
    crop = lambda a: None if a is None else np.clip(a.data[:, :, :H, :W], 0.0, 1.0)  # noqa: E731
    return crop(t), crop(J)


# -----------------------------------------------------------------------------
# reports
# -----------------------------------------------------------------------------
REPORT_COLUMNS = ["id", "ssim_trans", "ssim_dehazed", "ssim_hazy", "ssim_dcp_trans", "ssim_dcp_dehazed"]


@dataclass
class EvalReport:
    ids: list[str]
    ssim_trans: list[float | None]
    ssim_dehazed: list[float | None]
    ssim_hazy: list[float]
    ssim_dcp_trans: list[float]
    ssim_dcp_dehazed: list[float]
    fingerprint: str = ""
    seconds: list[float] = field(default_factory=list, compare=False)

    def __len__(self) -> int:
        return len(self.ids)

    @staticmethod
    def _mean(vals) -> float | None:
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    def means(self) -> dict[str, float | None]:
        return {k: self._mean(getattr(self, k)) for k in REPORT_COLUMNS[1:]}

    def table(self) -> str:
        m = self.means()
        fmt = lambda v: "N/A" if v is None else f"{v:.4f}"  # noqa: E731
        rows = [
            ("", "Input", "He et al. (DCP)", "Ours"),
            ("Transmission", "N/A", fmt(m["ssim_dcp_trans"]), fmt(m["ssim_trans"])),
            ("Image", fmt(m["ssim_hazy"]), fmt(m["ssim_dcp_dehazed"]), fmt(m["ssim_dehazed"])),
        ]
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        lines = [" | ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows]
        lines.insert(1, "-+-".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"

    def write(self, out_dir, timing: bool = False) -> dict[str, Path]:
        """Write ``report.csv`` and ``report.txt``; wall-clock ``timing.csv`` only on request."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for i, rid in enumerate(self.ids):
                w.writerow([rid] + [_cell(getattr(self, k)[i]) for k in REPORT_COLUMNS[1:]])
            w.writerow(["mean"] + [_cell(v) for v in self.means().values()])
        (out / "report.txt").write_text(f"SSIM on {len(self)} images (config {self.fingerprint[:12]})\n" + self.table())
        written = {"csv": out / "report.csv", "txt": out / "report.txt"}
        if timing:
            with open(out / "timing.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["id", "seconds"])
                for rid, s in zip(self.ids, self.seconds):
                    w.writerow([rid, f"{s:.6f}"])
            written["timing"] = out / "timing.csv"
        return written


def _cell(v) -> str:
    return "" if v is None else repr(float(v))


def _score_one(model: Model, hazy, clear, trans) -> tuple:
    t0 = time.perf_counter()
    t, J = infer(model, hazy[None])
    secs = time.perf_counter() - t0
    dj, dt, _ = dcp_estimate(hazy)
    return (
        ssim(t[0, 0], trans) if t is not None else None,
        ssim(J[0], clear) if J is not None else None,
        ssim(hazy, clear),
        ssim(dt, trans),
        ssim(dj, clear),
        secs,
        t,
        J,
    )


def evaluate_split(
    model: Model,
    data: LoadedSplit,
    fingerprint: str = "",
    panels: Path | None = None,
    max_panels: int = 8,
    workers: int = 0,
) -> EvalReport:
    """Score every image; ``workers`` > 1 spreads images over a thread pool.

    Results are collected in manifest order, so the report does not depend on
    the worker count.
    """
    jobs = [(data.hazy[i], data.clear[i], data.trans[i, 0]) for i in range(len(data.ids))]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scored = list(pool.map(lambda j: _score_one(model, *j), jobs))
    else:
        scored = [_score_one(model, *j) for j in jobs]
    cols = list(zip(*scored)) if scored else [[] for _ in range(8)]
    rep = EvalReport(list(data.ids), *[list(c) for c in cols[:5]], fingerprint, list(cols[5]))
    if panels is not None and scored:
        rows = []
        for (hazy, clear, trans), s in zip(jobs[:max_panels], scored):
            t, J = s[6], s[7]
            rows.append([hazy, None if J is None else J[0], clear, None if t is None else t[0], trans])
        plotting.contact_sheet(rows, ["input", "dehazed", "target", "t est.", "t true"], panels, row_labels=data.ids[:max_panels])
    return rep


def file_fingerprint(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def evaluate(checkpoint, manifest, split: str = "test", out_dir=None, workers: int = 0, timing: bool = False) -> EvalReport:
    """Score a checkpoint on one manifest split; writes CSV, text table and panels when ``out_dir`` is given."""
    mpath = resolve_manifest(Path(manifest), split)
    man = read_manifest(mpath)
    if man.split and man.split != split:
        raise ConfigError(f"manifest {mpath} holds split {man.split!r}, not {split!r}")
    model = load_model(checkpoint)
    data = load_split(man)
    fp = file_fingerprint(checkpoint, f"{checkpoint}.json", mpath)
    panels = Path(out_dir) / "panels.png" if out_dir is not None else None
    rep = evaluate_split(model, data, fp, panels, workers=workers)
    if out_dir is not None:
        rep.write(out_dir, timing=timing)
    return rep


# -----------------------------------------------------------------------------
# ablation grid
# -----------------------------------------------------------------------------
ABLATION_ORDER = TRANSMISSION_PRESETS + DEHAZING_PRESETS


@dataclass
class PresetResult:
    preset: str
    report: EvalReport
    loss_initial: float
    loss_final: float
    checkpoint: Path

    @property
    def loss_ratio(self) -> float:
        return self.loss_final / self.loss_initial


def _stage1_key(cfg: RunConfig) -> tuple:
    w = cfg.weights
    return (w.enable_adv, w.enable_grad, w.lambda_a, w.lambda_G, w.normalize)


def run_ablation_grid(config: RunConfig, train: LoadedSplit, test: LoadedSplit, out_dir) -> dict[str, PresetResult]:
    """Train and score every preset on identical data and seed.

    Presets whose stage-1 objective coincides share one stage-1 run. Results
    are written after each preset, so a failure leaves earlier ones on disk.
    """
    out = Path(out_dir)
    results: dict[str, PresetResult] = {}
    stage1_cache: dict[tuple, Path] = {}
    try:
        for name in ABLATION_ORDER:
            cfg = replace(config, preset=name)
            pdir = out / name
            pdir.mkdir(parents=True, exist_ok=True)
            w = cfg.weights
            if name in TRANSMISSION_PRESETS or w.enable_transmission_branch:
                key = _stage1_key(cfg)
                if key not in stage1_cache:
                    stage1_cache[key] = train_stage1(cfg, train, pdir)
                elif stage1_cache[key].parent != pdir:
                    for suffix in ("", ".json"):
                        shutil.copyfile(f"{stage1_cache[key]}{suffix}", pdir / f"stage1.htfa{suffix}")
                    shutil.copyfile(stage1_cache[key].parent / "stage1_loss.csv", pdir / "stage1_loss.csv")
            if name in TRANSMISSION_PRESETS:
                ckpt, curve = pdir / "stage1.htfa", pdir / "stage1_loss.csv"
            else:
                s1 = pdir / "stage1.htfa" if w.enable_transmission_branch else None
                ckpt, curve = train_stage2(cfg, train, s1, pdir), pdir / "stage2_loss.csv"
            e = plotting.read_loss_csv(curve)["loss_e"]
            first, last = smoothed_drop(e, cfg.smooth_window)
            rep = evaluate_split(load_model(ckpt), test, name, panels=pdir / "panels.png", max_panels=4)
            rep.write(pdir)
            results[name] = PresetResult(name, rep, first, last, ckpt)
            log.info("%s: loss %.4g -> %.4g", name, first, last)
    finally:
        write_ablation_tables(results, test, out)
    return results


def write_ablation_tables(results: dict[str, PresetResult], test: LoadedSplit, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    target_t = float(np.mean([ssim(t[0], t[0]) for t in test.trans]))
    target_j = float(np.mean([ssim(c, c) for c in test.clear]))
    input_t = float(np.mean([ssim(h.mean(axis=0), t[0]) for h, t in zip(test.hazy, test.trans)]))
    input_j = float(np.mean([ssim(h, c) for h, c in zip(test.hazy, test.clear)]))

    def line(label, inp, names, key, target):
        vals = []
        for n in names:
            r = results.get(n)
            v = r.report.means()[key] if r else None
            vals.append("N/A" if v is None else f"{v:.4f}")
        return [label, f"{inp:.4f}", *vals, f"{target:.4f}"]

    t1 = [["", "Input", *TRANSMISSION_PRESETS, "Target"], line("Transmission Map", input_t, TRANSMISSION_PRESETS, "ssim_trans", target_t)]
    t2 = [["", "Input", *DEHAZING_PRESETS, "Target"], line("Dehazed Image", input_j, DEHAZING_PRESETS, "ssim_dehazed", target_j)]
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in t1 + t2:
            w.writerow(row)
    with open(out / "ablation_losses.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["preset", "loss_e_initial", "loss_e_final", "ratio"])
        for n, r in results.items():
            w.writerow([n, repr(r.loss_initial), repr(r.loss_final), repr(r.loss_ratio)])
    text = []
    for tab in (t1, t2):
        widths = [max(len(r[i]) for r in tab) for i in range(len(tab[0]))]
        text += [" | ".join(c.ljust(wd) for c, wd in zip(r, widths)) for r in tab] + [""]
    (out / "ablation.txt").write_text("\n".join(text))
    bars = {}
    for n in ABLATION_ORDER:
        r = results.get(n)
        if r:
            v = r.report.means()["ssim_trans" if n in TRANSMISSION_PRESETS else "ssim_dehazed"]
            if v is not None:
                bars[n] = v
    if bars:
        plotting.ablation_bars(bars, out / "ablation.png")
    return out / "ablation.csv"
