"""Declarative construction of the transmission generator, patch discriminator
and guided dehazing network.

A network is a flat list of :class:`LayerSpec` entries interpreted in order.
Layers may stash their output under ``name``; ``skip`` and ``concat`` layers
pull a stashed tensor back in through ``source``. Parameter shapes follow
from the layer list and the input channel count alone.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError, FormatError, MissingFileError
from .formats import load_archive, save_archive
from .tensor import RunningStats, Tensor

GENERATOR_ENCODER = (15, 30, 60, 120, 120, 120, 120, 120)
DISCRIMINATOR_CHANNELS = (48, 96, 192, 384, 384)
DISCRIMINATOR_STRIDES = (2, 2, 2, 1, 1)
FEATURE_CHANNELS = (20, 40, 80)
FUSION_CHANNELS = (80, 40, 20)

CONV_KINDS = ("conv", "tconv")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    name: str = ""
    source: str = ""


@dataclass
class NetworkState:
    kind: str
    in_channels: int
    spec: list[LayerSpec]
    scale: float
    depth: int = 0
    seed: int = 0
    params: dict[str, Tensor] = field(default_factory=dict)
    stats: dict[str, RunningStats] = field(default_factory=dict)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = np.zeros_like(p.data) if flag else None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def channel_sequence(self, kinds=CONV_KINDS) -> list[int]:
        return [l.out_channels for l in self.spec if l.kind in kinds]

    def __call__(self, x: Tensor, mode: str = "train", **sources: Tensor) -> Tensor:
        return forward(self, x, mode, **sources)

    # -- serialization --------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {k: p.data for k, p in self.params.items()}
        for k, rs in self.stats.items():
            out[f"{k}.running_mean"] = rs.mean
            out[f"{k}.running_var"] = rs.var
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        for k, p in self.params.items():
            arr = arrays[prefix + k]
            if arr.shape != p.shape:
                raise FormatError(f"parameter {k}: stored shape {arr.shape}, expected {p.shape}")
            p.data = np.array(arr, dtype=p.data.dtype)
        for k, rs in self.stats.items():
            rs.mean[:] = arrays[f"{prefix}{k}.running_mean"]
            rs.var[:] = arrays[f"{prefix}{k}.running_var"]

    def meta(self) -> dict:
        return {
            "kind": self.kind,
            "in_channels": self.in_channels,
            "scale": self.scale,
            "depth": self.depth,
            "seed": self.seed,
            "spec": [asdict(l) for l in self.spec],
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "NetworkState":
        spec = [LayerSpec(**l) for l in meta["spec"]]
        return _allocate(cls(meta["kind"], meta["in_channels"], spec, meta["scale"], meta["depth"], meta["seed"]))


def scaled(n: int, scale: float) -> int:
    if not 0 < scale <= 1:
        raise ValueError(f"scale must lie in (0, 1], got {scale}")
    return max(1, math.ceil(n * scale - 1e-9))


# -----------------------------------------------------------------------------
# builders
# -----------------------------------------------------------------------------
def generator_spec(scale: float = 1.0, depth: int = 8) -> list[LayerSpec]:
    if not 1 <= depth <= len(GENERATOR_ENCODER):
        raise ValueError(f"generator depth must be 1..{len(GENERATOR_ENCODER)}")
    enc = [scaled(c, scale) for c in GENERATOR_ENCODER[:depth]]
    spec: list[LayerSpec] = []
    for i, c in enumerate(enc, start=1):
        spec.append(LayerSpec("conv", c, 4, 2, 1))
        if i > 1:
            spec.append(LayerSpec("batchnorm"))
        spec.append(LayerSpec("prelu", name=f"e{i}"))
    for k in range(1, depth):
        spec.append(LayerSpec("tconv", enc[depth - 1 - k], 4, 2, 1))
        spec.append(LayerSpec("batchnorm"))
        spec.append(LayerSpec("relu"))
        spec.append(LayerSpec("skip", source=f"e{depth - k}"))
    spec.append(LayerSpec("tconv", 1, 4, 2, 1))
    spec.append(LayerSpec("tanh"))
    return spec


def discriminator_spec(scale: float = 1.0) -> list[LayerSpec]:
    spec: list[LayerSpec] = []
    for i, (c, s) in enumerate(zip(DISCRIMINATOR_CHANNELS, DISCRIMINATOR_STRIDES)):
        spec.append(LayerSpec("conv", scaled(c, scale), 4, s, 1))
        spec.append(LayerSpec("batchnorm"))
        if i > 0:
            spec.append(LayerSpec("prelu"))
    spec.append(LayerSpec("conv", 1, 1, 1, 0))
    spec.append(LayerSpec("sigmoid"))
    return spec


def dehazer_spec(scale: float = 1.0) -> list[LayerSpec]:
    spec: list[LayerSpec] = []
    for i, c in enumerate(FEATURE_CHANNELS):
        spec.append(LayerSpec("conv", scaled(c, scale), 3, 1, 1))
        if i > 0:
            spec.append(LayerSpec("batchnorm"))
        spec.append(LayerSpec("prelu"))
    spec.append(LayerSpec("conv", 1, 3, 1, 1))
    spec.append(LayerSpec("concat", source="t"))
    for i, c in enumerate(FUSION_CHANNELS):
        spec.append(LayerSpec("conv", scaled(c, scale), 3, 1, 1))
        if i > 0:
            spec.append(LayerSpec("batchnorm"))
        spec.append(LayerSpec("prelu"))
    spec.append(LayerSpec("conv", 3, 3, 1, 1))
    spec.append(LayerSpec("tanh"))
    return spec


def _allocate(state: NetworkState) -> NetworkState:
    """Create zero-valued parameters whose shapes follow from the layer list."""
    dt = T.DEFAULT_DTYPE
    c = state.in_channels
    stash: dict[str, int] = {"t": 1}
    params: dict[str, Tensor] = {}
    stats: dict[str, RunningStats] = {}
    for i, l in enumerate(state.spec):
        key = f"L{i:02d}"
        if l.kind == "conv":
            params[f"{key}.weight"] = Tensor(np.zeros((l.out_channels, c, l.kernel, l.kernel), dt), True)
            params[f"{key}.bias"] = Tensor(np.zeros(l.out_channels, dt), True)
            c = l.out_channels
        elif l.kind == "tconv":
            params[f"{key}.weight"] = Tensor(np.zeros((c, l.out_channels, l.kernel, l.kernel), dt), True)
            params[f"{key}.bias"] = Tensor(np.zeros(l.out_channels, dt), True)
            c = l.out_channels
        elif l.kind == "batchnorm":
            params[f"{key}.gamma"] = Tensor(np.ones(c, dt), True)
            params[f"{key}.beta"] = Tensor(np.zeros(c, dt), True)
            stats[key] = RunningStats(c, dt)
        elif l.kind == "prelu":
            params[f"{key}.slope"] = Tensor(np.full(c, 0.25, dt), True)
        elif l.kind == "concat":
            c = c + stash[l.source]
        elif l.kind not in ("relu", "tanh", "sigmoid", "skip"):
            raise ValueError(f"unknown layer kind {l.kind!r}")
        if l.name:
            stash[l.name] = c
    state.params, state.stats = params, stats
    return state


def init_params(state: NetworkState, seed: int) -> NetworkState:
    """Weights ~ N(0, 0.02^2), biases 0, BN gamma ~ N(1, 0.02^2), beta 0, PReLU slopes 0.25."""
    rng = np.random.default_rng(seed)
    state.seed = seed
    for name, p in state.params.items():
        if name.endswith(".weight"):
            p.data = rng.normal(0.0, 0.02, size=p.shape).astype(p.data.dtype)
        elif name.endswith(".gamma"):
            p.data = rng.normal(1.0, 0.02, size=p.shape).astype(p.data.dtype)
        elif name.endswith(".slope"):
            p.data = np.full(p.shape, 0.25, dtype=p.data.dtype)
        else:
            p.data = np.zeros(p.shape, dtype=p.data.dtype)
    for rs in state.stats.values():
        rs.mean[:] = 0.0
        rs.var[:] = 1.0
    return state


def build_generator(scale: float = 1.0, depth: int = 8, seed: int = 0) -> NetworkState:
    st = NetworkState("generator", 3, generator_spec(scale, depth), scale, depth)
    return init_params(_allocate(st), seed)


def build_discriminator(scale: float = 1.0, seed: int = 0, conditional: bool = False) -> NetworkState:
    st = NetworkState("discriminator", 4 if conditional else 1, discriminator_spec(scale), scale)
    return init_params(_allocate(st), seed)


def build_dehazer(scale: float = 1.0, seed: int = 0) -> NetworkState:
    st = NetworkState("dehazer", 3, dehazer_spec(scale), scale)
    return init_params(_allocate(st), seed)


# -----------------------------------------------------------------------------
# forward pass
# -----------------------------------------------------------------------------
def _prefix_add(x: Tensor, y: Tensor) -> Tensor:
    """Shortcut addition; on a channel-count mismatch only the shared prefix is summed."""
    if x.shape == y.shape:
        return T.skip_add(x, y)
    if x.shape[0] != y.shape[0] or x.shape[2:] != y.shape[2:]:
        raise DimensionError(f"shortcut between {x.shape} and {y.shape}")
    c = min(x.shape[1], y.shape[1])
    head = T.skip_add(x[:, :c], y[:, :c])
    if x.shape[1] == c:
        return head
    return T.concat_channels(head, x[:, c:])


def check_input(state: NetworkState, x: Tensor) -> None:
    if x.ndim != 4 or x.shape[1] != state.in_channels:
        raise DimensionError(f"{state.kind} expects (B, {state.in_channels}, H, W), got {x.shape}")
    if state.kind == "generator":
        m = 2**state.depth
        if x.shape[2] % m or x.shape[3] % m:
            raise DimensionError(f"generator of depth {state.depth} needs spatial size divisible by {m}, got {x.shape[2:]}")


def forward(state: NetworkState, x: Tensor, mode: str = "train", **sources: Tensor) -> Tensor:
    check_input(state, x)
    stash = dict(sources)
    p, stats = state.params, state.stats
    for i, l in enumerate(state.spec):
        key = f"L{i:02d}"
        if l.kind == "conv":
            x = T.conv2d(x, p[f"{key}.weight"], p[f"{key}.bias"], l.stride, l.padding)
        elif l.kind == "tconv":
            x = T.transpose_conv2d(x, p[f"{key}.weight"], p[f"{key}.bias"], l.stride, l.padding)
        elif l.kind == "batchnorm":
            x = T.batch_norm(x, p[f"{key}.gamma"], p[f"{key}.beta"], stats[key], mode)
        elif l.kind == "prelu":
            x = T.prelu(x, p[f"{key}.slope"])
        elif l.kind == "relu":
            x = T.relu(x)
        elif l.kind == "tanh":
            x = T.tanh_act(x)
        elif l.kind == "sigmoid":
            x = T.sigmoid_act(x)
        elif l.kind == "skip":
            x = _prefix_add(x, stash[l.source])
        elif l.kind == "concat":
            if l.source not in stash:
                raise DimensionError(f"{state.kind} needs a {l.source!r} input to concatenate")
            src = stash[l.source]
            if src.shape[2:] != x.shape[2:] or src.shape[0] != x.shape[0]:
                raise DimensionError(f"cannot concatenate {src.shape} onto {x.shape}")
            x = T.concat_channels(x, src)
        if l.name:
            stash[l.name] = x
    return x


def output_shape(state: NetworkState, shape: tuple[int, ...]) -> tuple[int, ...]:
    """Shape propagation without running any arithmetic."""
    B, c, H, W = shape
    stash = {"t": 1}
    for l in state.spec:
        if l.kind == "conv":
            c = l.out_channels
            H, W = T.conv_output_size(H, l.kernel, l.stride, l.padding), T.conv_output_size(W, l.kernel, l.stride, l.padding)
        elif l.kind == "tconv":
            c = l.out_channels
            H, W = T.tconv_output_size(H, l.kernel, l.stride, l.padding), T.tconv_output_size(W, l.kernel, l.stride, l.padding)
        elif l.kind == "concat":
            c += stash[l.source]
        if l.name:
            stash[l.name] = c
    return (B, c, H, W)


def receptive_field(spec: list[LayerSpec]) -> int:
    """Receptive field of a purely feed-forward convolution stack."""
    r, jump = 1, 1
    for l in spec:
        if l.kind in ("tconv", "skip", "concat"):
            raise ValueError(f"receptive field undefined for non-sequential layer {l.kind!r}")
        if l.kind == "conv":
            r += (l.kernel - 1) * jump
            jump *= l.stride
    return r


_LETTERS = {"batchnorm": "B", "prelu": "P", "relu": "R"}


def describe(spec: list[LayerSpec]) -> str:
    """Render a layer list in the compact notation, e.g. ``CP(15)-CBP(30)-...-TC(1)-TanH``.

    A convolution absorbs the norm/activation letters that follow it;
    shortcuts are omitted.
    """
    parts: list[str] = []
    head, n = "", 0
    for l in spec + [LayerSpec("end")]:
        if l.kind in _LETTERS and head:
            head += _LETTERS[l.kind]
            continue
        if head:
            parts.append(f"{head}({n})")
            head = ""
        if l.kind in CONV_KINDS:
            head, n = ("C" if l.kind == "conv" else "TC"), l.out_channels
        elif l.kind == "concat":
            # the only concatenated source is the 1-channel transmission map
            parts.append(f"Conca({n + 1})")
        elif l.kind == "tanh":
            parts.append("TanH")
        elif l.kind == "sigmoid":
            parts.append("Sigmoid")
    return "-".join(parts)


def to_unit(x: Tensor) -> Tensor:
    """Map a tanh output in [-1, 1] to [0, 1]."""
    return x * 0.5 + 0.5


def from_unit(x: np.ndarray) -> np.ndarray:
    return x * 2.0 - 1.0


# -----------------------------------------------------------------------------
# persistence
# -----------------------------------------------------------------------------
def save_networks(path, nets: dict[str, NetworkState], extra: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> None:
    """Write an HTF1 archive plus a JSON text sidecar (``<path>.json``) describing the layer lists."""
    arrays: dict[str, np.ndarray] = {}
    for prefix, net in nets.items():
        for k, v in net.state_arrays().items():
            arrays[f"{prefix}/{k}"] = v
    for k, v in (extra or {}).items():
        arrays[k] = v
    save_archive(arrays, path)
    side = {"networks": {k: n.meta() for k, n in nets.items()}, **(meta or {})}
    with open(f"{path}.json", "w") as fh:
        json.dump(side, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_networks(path) -> tuple[dict[str, NetworkState], dict[str, np.ndarray], dict]:
    arrays = load_archive(path)
    try:
        with open(f"{path}.json") as fh:
            side = json.load(fh)
    except FileNotFoundError as exc:
        raise MissingFileError(f"checkpoint sidecar missing: {path}.json") from exc
    nets = {}
    for prefix, meta in side["networks"].items():
        net = NetworkState.from_meta(meta)
        net.load_arrays(arrays, prefix=f"{prefix}/")
        nets[prefix] = net
    extra = {k: v for k, v in arrays.items() if k.split("/", 1)[0] not in nets}
    return nets, extra, side
