"""Atmospheric scattering model: haze synthesis and its closed-form inverse.

Images are channels-first float arrays in [0, 1]; depth and transmission
maps are (H, W). Atmospheric light is either a scalar, a per-channel
3-vector, or a full (C, H, W) map.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NonFiniteError

A_RANGE = (0.5, 1.2)
BETA_RANGE = (0.4, 1.6)
T_FLOOR = 0.05


@dataclass(frozen=True)
class HazeParams:
    A: np.ndarray  # shape (3,) or (3, H, W)
    beta: float

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")


@dataclass
class SceneSample:
    id: str
    J: np.ndarray
    d: np.ndarray
    params: HazeParams
    t: np.ndarray
    I: np.ndarray
    clamped: int = 0
    image_id: str = field(default="")


def _airlight(A, shape) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim == 0:
        return np.full((shape[0], 1, 1), float(A))
    if A.ndim == 1:
        if A.shape[0] != shape[0]:
            raise DimensionError(f"atmospheric light has {A.shape[0]} channels, image has {shape[0]}")
        return A.reshape(-1, 1, 1)
    if A.shape != tuple(shape):
        raise DimensionError(f"atmospheric light map {A.shape} does not match image {shape}")
    return A


def normalize_depth(d: np.ndarray) -> np.ndarray:
    """Scale a nonnegative depth map into [0, 1] by its maximum."""
    d = np.asarray(d, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise NonFiniteError("depth map contains non-finite values")
    d = np.maximum(d, 0.0)
    m = d.max()
    return d / m if m > 0 else d


def depth_to_transmission(d: np.ndarray, beta: float) -> np.ndarray:
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    d = np.asarray(d, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise NonFiniteError("depth map contains non-finite values")
    return np.exp(-beta * d)


def synthesize_hazy(J: np.ndarray, t: np.ndarray, A, clamp: bool = True) -> tuple[np.ndarray, int]:
    """Mix ``J`` with airlight ``A`` according to transmission ``t``.

    Returns the hazy image and the number of values that fell outside [0, 1]
    and were clamped.
    """
    J = np.asarray(J, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if t.shape != J.shape[-2:]:
        raise DimensionError(f"transmission {t.shape} does not match image {J.shape}")
    I = J * t + _airlight(A, J.shape) * (1.0 - t)
    if not clamp:
        return I, 0
    n_clamped = int(np.count_nonzero((I < 0.0) | (I > 1.0)))
    return np.clip(I, 0.0, 1.0), n_clamped


def invert_closed_form(I: np.ndarray, t: np.ndarray, A, t_floor: float = T_FLOOR) -> np.ndarray:
    """Recover the clear scene from hazy ``I``; transmission below ``t_floor`` is raised to it.

    Written as ``(I - A) / max(t, t_floor) + A``, which equals the direct
    rearrangement of the mixing model wherever ``t >= t_floor`` and keeps a
    pure-airlight pixel at ``A`` even where the floor is active.
    """
    if not t_floor > 0:
        raise ValueError("t_floor must be positive")
    I = np.asarray(I, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if t.shape != I.shape[-2:]:
        raise DimensionError(f"transmission {t.shape} does not match image {I.shape}")
    A = _airlight(A, I.shape)
    J = (I - A) / np.maximum(t, t_floor) + A
    return np.clip(J, 0.0, 1.0)


def sample_params(rng: np.random.Generator, A_range=A_RANGE, beta_range=BETA_RANGE, per_channel: bool = False) -> HazeParams:
    if per_channel:
        A = rng.uniform(A_range[0], A_range[1], size=3)
    else:
        A = np.full(3, rng.uniform(A_range[0], A_range[1]))
    beta = float(rng.uniform(beta_range[0], beta_range[1]))
    return HazeParams(A=A, beta=beta)
