"""Command-line front end: ``hazeforge synth|train|dehaze|eval|gradcheck|ablate``.

Every failure ends the process with a nonzero status and one stderr line of
the form ``E_CODE: message``.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import pipeline
from .checks import run_checks
from .config import RunConfig, load_config
from .errors import HazeError
from .evaluation import evaluate

log = logging.getLogger("hazeforge")

EXIT_FAILED_CHECK = 1
EXIT_ERROR = 2

# flag -> RunConfig field; every one of these overrides the config file
_OVERRIDES = {
    "seed": int,
    "preset": str,
    "n_images": int,
    "draws": int,
    "image_size": int,
    "scale": float,
    "depth": int,
    "batch_size": int,
    "stage1_iters": int,
    "stage2_iters": int,
    "lr": float,
}


def _add_config_flags(p: argparse.ArgumentParser, overrides=tuple(_OVERRIDES)) -> None:
    p.add_argument("--config", type=Path, help="INI file with [data]/[model]/[train]/[loss]/[paths] sections")
    for name in overrides:
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=_OVERRIDES[name], default=None)


def _config(args) -> RunConfig:
    over = {k: getattr(args, k, None) for k in _OVERRIDES}
    return load_config(args.config, **over)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hazeforge", description="Transmission-guided single-image dehazing on a numpy autograd core.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a hazy dataset with train/test manifests")
    _add_config_flags(p)
    p.add_argument("--out", type=Path, help="dataset directory (default: [paths] data_dir)")

    p = sub.add_parser("train", help="train stage 1, stage 2 or both")
    _add_config_flags(p)
    p.add_argument("--stage", choices=["1", "2", "both"], default="both")
    p.add_argument("--data", type=Path, help="dataset directory (default: [paths] data_dir)")
    p.add_argument("--out", type=Path, help="run directory (default: [paths] out_dir/<preset>)")

    p = sub.add_parser("dehaze", help="dehaze one PNG with a stage-2 checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--dump-transmission", type=Path, help="write the estimated map (.png as 8-bit, anything else as HTF1)")

    p = sub.add_parser("eval", help="SSIM report on a manifest split")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True, help="manifest file or dataset directory")
    p.add_argument("--split", default="test")
    p.add_argument("--out", type=Path, help="report directory (default: eval_<split> beside the checkpoint)")
    p.add_argument("--timing", action="store_true", help="also write per-image wall-clock seconds to timing.csv")

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--module", choices=["all", "tensor", "losses", "networks"], default="all")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("ablate", help="train and score all six presets")
    _add_config_flags(p, [k for k in _OVERRIDES if k != "preset"])
    p.add_argument("--data", type=Path)
    p.add_argument("--out", type=Path, help="grid directory (default: [paths] out_dir/ablation)")
    return ap


# -----------------------------------------------------------------------------
# commands
# -----------------------------------------------------------------------------
def cmd_synth(args) -> int:
    cfg = _config(args)
    out = args.out or Path(cfg.data_dir)
    written = pipeline.synthesize(cfg, out)
    for split, path in written.items():
        print(f"{split}\t{path}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    data = args.data or Path(cfg.data_dir)
    out = args.out or Path(cfg.out_dir) / cfg.preset
    for key, path in pipeline.train(cfg, args.stage, data, out).items():
        print(f"{key}\t{path}")
    return 0


def cmd_dehaze(args) -> int:
    pipeline.dehaze_file(args.checkpoint, args.input, args.out, args.dump_transmission)
    print(args.out)
    return 0


def cmd_eval(args) -> int:
    out = args.out or args.checkpoint.parent / f"eval_{args.split}"
    rep = evaluate(args.checkpoint, args.manifest, args.split, out, workers=pipeline.thread_limit(), timing=args.timing)
    sys.stdout.write(rep.table())
    print(f"report\t{out / 'report.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_checks(args.module, args.seed)
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_FAILED_CHECK if failed else 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    data = args.data or Path(cfg.data_dir)
    out = args.out or Path(cfg.out_dir) / "ablation"
    results = pipeline.ablate(cfg, data, out)
    print((out / "ablation.txt").read_text(), end="")
    for name, r in results.items():
        print(f"{name}\tloss_e {r.loss_initial:.4g} -> {r.loss_final:.4g} (ratio {r.loss_ratio:.3f})")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "dehaze": cmd_dehaze,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


@contextlib.contextmanager
def _thread_cap(n: int):
    """Cap BLAS threads; 0 (the default) pins everything to one thread."""
    with threadpool_limits(limits=max(n, 1)):
        yield


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_cap(pipeline.thread_limit()):
            return COMMANDS[args.command](args)
    except HazeError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"E_IO: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
