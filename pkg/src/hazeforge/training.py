"""ADAM, GAN alternation and the two-stage training schedule."""
from __future__ import annotations

import contextlib
import csv
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses as L
from . import tensor as T
from .config import RunConfig, parse_config
from .dataset import LoadedSplit
from .errors import ConfigError, NonFiniteError
from .networks import (
    NetworkState,
    build_dehazer,
    build_discriminator,
    build_generator,
    from_unit,
    load_networks,
    save_networks,
    to_unit,
)
from .tensor import Tensor

log = logging.getLogger(__name__)

CSV_HEADER = ["iter", "loss_total", "loss_e", "loss_a", "loss_g", "loss_p"]


# -----------------------------------------------------------------------------
# optimizer
# -----------------------------------------------------------------------------
@dataclass
class AdamState:
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}/step": np.array([self.step], dtype=np.int64)}
        for k in self.m:
            out[f"{prefix}/m/{k}"] = self.m[k]
            out[f"{prefix}/v/{k}"] = self.v[k]
        return out

    def load(self, arrays: dict[str, np.ndarray], prefix: str) -> None:
        self.step = int(arrays[f"{prefix}/step"][0])
        self.m = {k[len(prefix) + 3 :]: v.copy() for k, v in arrays.items() if k.startswith(f"{prefix}/m/")}
        self.v = {k[len(prefix) + 3 :]: v.copy() for k, v in arrays.items() if k.startswith(f"{prefix}/v/")}


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """One bias-corrected ADAM update using each parameter's ``.grad``."""
    grads = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise NonFiniteError(f"non-finite gradient in {name} ({bad} of {g.size} entries); step {state.step} aborted")
        grads[name] = g
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@contextlib.contextmanager
def frozen(net: NetworkState):
    """Stop gradients from accumulating into ``net`` for the duration."""
    prev = [p.requires_grad for p in net.params.values()]
    for p in net.params.values():
        p.requires_grad = False
    try:
        yield net
    finally:
        for p, flag in zip(net.params.values(), prev):
            p.requires_grad = flag


def _zero(net: NetworkState) -> None:
    for p in net.params.values():
        p.grad = np.zeros_like(p.data)


# -----------------------------------------------------------------------------
# trainer
# -----------------------------------------------------------------------------
class Trainer:
    """Owns the three networks, their optimizers and the batch schedule."""

    NO_T_FILL = 0.5

    def __init__(self, config: RunConfig, data: LoadedSplit):
        self.cfg = config
        self.w = config.weights
        self.data = data
        s = config.seed
        self.G = build_generator(config.scale, config.depth, seed=s + 1)
        self.D = build_discriminator(config.scale, seed=s + 2, conditional=config.conditional_d)
        self.E = build_dehazer(config.scale, seed=s + 3)
        self.feat = L.FeatureNet(seed=config.feature_seed)
        self.opt = {k: self._adam() for k in ("G", "D", "E")}
        self.iteration = {1: 0, 2: 0}

    def _adam(self) -> AdamState:
        c = self.cfg
        return AdamState(lr=c.lr, beta1=c.beta1, beta2=c.beta2, eps=c.eps)

    @property
    def nets(self) -> dict[str, NetworkState]:
        return {"G": self.G, "D": self.D, "E": self.E}

    def trainable_groups(self, stage: int) -> list[str]:
        w = self.w
        if stage == 1:
            return ["G", "D"] if w.enable_adv else ["G"]
        if not w.enable_transmission_branch:
            return ["E"]
        groups = ["G", "E"]
        if w.enable_adv and self.cfg.train_d_stage2:
            groups.insert(1, "D")
        return groups

    # -- data -----------------------------------------------------------------
    def batch_indices(self, stage: int, it: int) -> np.ndarray:
        n = len(self.data.ids)
        rng = np.random.default_rng([self.cfg.seed, stage, it])
        return rng.choice(n, size=self.cfg.batch_size, replace=n < self.cfg.batch_size)

    def batch(self, stage: int, it: int):
        idx = self.batch_indices(stage, it)
        d = self.data
        return from_unit(d.hazy[idx]), d.trans[idx], d.clear[idx]

    # -- pieces ---------------------------------------------------------------
    def _disc_input(self, t: Tensor, x: Tensor) -> Tensor:
        return T.concat_channels(t, x) if self.cfg.conditional_d else t

    def _update(self, name: str) -> None:
        net = self.nets[name]
        adam_step(net.params, self.opt[name])
        _zero(net)

    def _d_step(self, t_fake: np.ndarray, t_real: np.ndarray, x: Tensor) -> None:
        for _ in range(self.cfg.d_updates):
            _zero(self.D)
            d_real = self.D(self._disc_input(Tensor(t_real), x))
            d_fake = self.D(self._disc_input(Tensor(t_fake), x))
            T.backward(L.adversarial_d_loss(d_real, d_fake))
            self._update("D")

    def _check(self, loss: Tensor) -> None:
        if not np.isfinite(loss.data).all():
            raise NonFiniteError(f"non-finite loss at stage iteration {self.iteration}")

    def step_stage1(self) -> dict[str, float]:
        it = self.iteration[1] + 1
        xh, t_real, _ = self.batch(1, it)
        x = Tensor(xh)
        _zero(self.G)
        t_pred = to_unit(self.G(x))
        if self.w.enable_adv:
            self._d_step(t_pred.data, t_real, x)
            with frozen(self.D):
                d_out = self.D(self._disc_input(t_pred, x))
        else:
            d_out = None
        terms = L.transmission_terms(t_pred, t_real, d_out, self.w)
        total = L.combine_transmission(terms, self.w)
        self._check(total)
        T.backward(total)
        self._update("G")
        self.iteration[1] = it
        return _row(it, total, e=terms["e"], a=terms.get("a"), g=terms.get("g"))

    def step_stage2(self) -> dict[str, float]:
        it = self.iteration[2] + 1
        xh, t_real, clear = self.batch(2, it)
        x = Tensor(xh)
        groups = self.trainable_groups(2)
        for name in groups:
            _zero(self.nets[name])
        t_terms: dict[str, Tensor] = {}
        if self.w.enable_transmission_branch:
            t_pred = to_unit(self.G(x))
            if "D" in groups:
                self._d_step(t_pred.data, t_real, x)
            d_out = None
            if self.w.enable_adv:
                with frozen(self.D):
                    d_out = self.D(self._disc_input(t_pred, x))
            t_terms = L.transmission_terms(t_pred, t_real, d_out, self.w)
            t_guide = t_pred
        else:
            t_guide = Tensor(np.full(t_real.shape, self.NO_T_FILL))
        j_pred = to_unit(self.E(x, t=t_guide))
        d_terms = L.dehazing_terms(j_pred, clear, self.feat, self.w)
        total = L.combine_dehazing(d_terms, self.w)
        if t_terms:
            total = T.add(total, L.combine_transmission(t_terms, self.w) * self.cfg.stage2_t_weight)
        self._check(total)
        T.backward(total)
        for name in groups:
            if name != "D":
                self._update(name)
        self.iteration[2] = it
        return _row(it, total, e=d_terms["e"], a=t_terms.get("a"), g=t_terms.get("g"), p=d_terms.get("p"))

    def run_stage(self, stage: int, iters: int, csv_path: Path | None = None) -> list[dict[str, float]]:
        if stage == 1:
            for name in ("G", "D"):
                self.nets[name].set_trainable(True)
        step = self.step_stage1 if stage == 1 else self.step_stage2
        rows = []
        writer = fh = None
        if csv_path is not None:
            Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
            fh = open(csv_path, "w", newline="")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER)
        try:
            for _ in range(iters):
                row = step()
                rows.append(row)
                if writer:
                    writer.writerow([row[k] if k == "iter" else repr(row[k]) for k in CSV_HEADER])
                if row["iter"] % 50 == 0:
                    log.info("stage %d iter %d loss %.5g", stage, row["iter"], row["loss_total"])
        finally:
            if fh:
                fh.close()
        return rows

    # -- persistence ----------------------------------------------------------
    def save(self, path, stage: int) -> Path:
        extra = {}
        for name, opt in self.opt.items():
            extra.update(opt.arrays(f"adam{name}"))
        meta = {
            "stage": stage,
            "iteration": dict((str(k), v) for k, v in self.iteration.items()),
            "config": self.cfg.to_text(),
        }
        save_networks(path, self.nets, extra, meta)
        return Path(path)

    @classmethod
    def load(cls, path, data: LoadedSplit, config: RunConfig | None = None) -> "Trainer":
        nets, extra, side = load_networks(path)
        cfg = config or parse_config(side["config"])
        tr = cls(cfg, data)
        for name, net in nets.items():
            if net.meta()["spec"] != tr.nets[name].meta()["spec"]:
                raise ConfigError(f"checkpoint network {name} does not match the configuration")
            setattr(tr, name, net)
        for name, opt in tr.opt.items():
            opt.load(extra, f"adam{name}")
        tr.iteration = {int(k): v for k, v in side["iteration"].items()}
        return tr


def _row(it: int, total: Tensor, **terms: Tensor | None) -> dict[str, float]:
    row = {"iter": it, "loss_total": total.item()}
    for k in ("e", "a", "g", "p"):
        v = terms.get(k)
        row[f"loss_{k}"] = v.item() if v is not None else 0.0
    return row


def smoothed_drop(values, window: int = 10) -> tuple[float, float]:
    """Mean of the first and of the last ``window`` values."""
    v = np.asarray(values, dtype=np.float64)
    w = min(window, len(v))
    return float(v[:w].mean()), float(v[-w:].mean())


def fingerprint(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(arrays):
        h.update(k.encode())
        h.update(np.ascontiguousarray(arrays[k]).tobytes())
    return h.hexdigest()


# -----------------------------------------------------------------------------
# stage drivers
# -----------------------------------------------------------------------------
def train_stage1(config: RunConfig, data: LoadedSplit, out_dir) -> Path:
    out = Path(out_dir)
    tr = Trainer(config, data)
    tr.run_stage(1, config.stage1_iters, out / "stage1_loss.csv")
    return tr.save(out / "stage1.htfa", stage=1)


def train_stage2(config: RunConfig, data: LoadedSplit, stage1_checkpoint, out_dir) -> Path:
    out = Path(out_dir)
    if stage1_checkpoint is not None:
        tr = Trainer.load(stage1_checkpoint, data, config)
    else:
        tr = Trainer(config, data)
    tr.run_stage(2, config.stage2_iters, out / "stage2_loss.csv")
    return tr.save(out / "stage2.htfa", stage=2)
