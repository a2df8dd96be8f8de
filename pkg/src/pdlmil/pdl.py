"""Progressive dropout layer.

Per layer and per bag: average-pool each instance embedding, softmax across
instances (APBA), build an ascending drop-rate vector by non-linear
interpolation, hand the largest rates to the highest-attention instances and
drop whole instance rows with those rates. The global cap on the rates is
raised epoch by epoch by a progressive scheduler that starts at zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .numerics import Rng, as_matrix, stable_softmax

KINDS = ("log", "cos", "exp")


@dataclass(frozen=True, slots=True)
class Interpolation:
    """Interpolation family and its spacing parameters."""

    kind: str = "log"
    G: float = 10.0
    E: float = 0.5
    B: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "kind", self.kind.lower())
        if self.kind not in KINDS:
            raise ValueError(f"unknown interpolation kind {self.kind!r}; expected one of {KINDS}")
        if not self.G > 1:
            raise ValueError("G must be > 1")
        if not self.E > 0:
            raise ValueError("E must be > 0")
        if not self.B > 0:
            raise ValueError("B must be > 0")


def interpolate_rates(interp: Interpolation | str, P: float, K: int) -> np.ndarray:
    """K non-decreasing rates from 0 to ``P`` following ``interp``.

    A single-element request yields ``[0.0]``.
    """
    if isinstance(interp, str):
        interp = Interpolation(interp)
    if not 0.0 <= P < 1.0:
        raise ValueError(f"P must lie in [0, 1), got {P}")
    if K < 1:
        raise ValueError("K must be >= 1")
    if K == 1:
        return np.zeros(1)
    G, E, B = interp.G, interp.E, interp.B
    if interp.kind == "log":
        x = np.linspace(0.0, G**E - 1.0, K)
        rates = P / E * (np.log(x + 1.0) / np.log(G))
    elif interp.kind == "cos":
        rates = P * (0.5 * (1.0 - np.cos(np.linspace(0.0, np.pi, K))))
    else:
        x = np.linspace(0.0, np.log(B + 1.0) / np.log(G), K)
        rates = P / B * (G**x - 1.0)
    rates[0] = 0.0
    rates[-1] = P
    return rates


def apba(embeddings) -> np.ndarray:
    """Instance attention from the per-instance feature mean, softmaxed over instances."""
    v = as_matrix(embeddings)
    if v.shape[0] == 0 or v.shape[1] == 0:
        raise ValueError("APBA needs a non-empty K x C matrix")
    return stable_softmax(v.mean(axis=1))


def assign_rates(attention, rates) -> np.ndarray:
    """Pair instances with rates by rank: the r-th most attended gets the r-th largest rate.

    Ties in attention go to the lower instance index first.
    """
    attention = np.asarray(attention, dtype=np.float64).ravel()
    rates = np.asarray(rates, dtype=np.float64).ravel()
    if attention.shape != rates.shape:
        raise ValueError(f"length mismatch: {attention.size} attention weights vs {rates.size} rates")
    order = np.argsort(-attention, kind="stable")
    desc = np.sort(rates)[::-1]
    out = np.empty_like(rates)
    out[order] = desc
    return out


@dataclass
class PdlLayerState:
    attention: np.ndarray = field(default_factory=lambda: np.zeros(0))
    assigned_rates: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mask: np.ndarray = field(default_factory=lambda: np.zeros(0))
    scale: np.ndarray = field(default_factory=lambda: np.zeros(0))
    global_rate: float = 0.0


def sample_mask(p_prime, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Instance keep mask (1 = kept) and inverted-dropout scale per instance."""
    p = np.asarray(p_prime, dtype=np.float64).ravel()
    if np.any(p < 0) or np.any(p >= 1):
        raise ValueError("per-instance drop rates must lie in [0, 1)")
    mask = (rng.uniform(p.size) >= p).astype(np.float64)
    scale = mask / (1.0 - p)
    return mask, scale


class ScheduleState(NamedTuple):
    """Epoch position for the progressive scheduler.

    ``progressive=False`` pins the global rate at ``p_max`` for every epoch
    (the fixed-threshold ablation).
    """

    t: int
    T: int
    p_max: float = 0.45
    interp: Interpolation = Interpolation()
    progressive: bool = True


@lru_cache(maxsize=64)
def progressive_schedule(interp: Interpolation, p_max: float, T: int) -> tuple[float, ...]:
    """Global drop rate for every epoch 0..T-1: the T-point interpolation from 0 to ``p_max``."""
    return tuple(interpolate_rates(interp, p_max, T).tolist())


def scheduler_value(state: ScheduleState) -> float:
    if state.T < 2:
        raise ValueError("scheduler horizon T must be >= 2")
    if not 0 <= state.t < state.T:
        raise ValueError(f"epoch {state.t} outside [0, {state.T})")
    if not state.progressive:
        return float(state.p_max)
    return progressive_schedule(state.interp, float(state.p_max), state.T)[state.t]


def pdl_forward(
    embeddings,
    schedule: ScheduleState | float,
    rng: Rng,
    mode: str = "train",
    interp: Interpolation = Interpolation(),
    rescale: bool = True,
) -> tuple[np.ndarray, PdlLayerState]:
    """Apply instance-based dropout with attention-ranked rates.

    With ``rescale`` kept rows are multiplied by ``1 / (1 - p'_k)``; otherwise
    they pass through unscaled and ``state.scale`` equals the mask.

    ``schedule`` is either a :class:`ScheduleState` or an already evaluated
    global rate for the current epoch.
    """
    if isinstance(schedule, ScheduleState):
        global_rate = scheduler_value(schedule)
    else:
        global_rate = float(schedule)
    v = as_matrix(embeddings)
    if mode == "eval":
        return v, PdlLayerState()
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    att = apba(v)
    rates = interpolate_rates(interp, global_rate, v.shape[0])
    p_prime = assign_rates(att, rates)
    mask, scale = sample_mask(p_prime, rng)
    if not rescale:
        scale = mask.copy()
    state = PdlLayerState(att, p_prime, mask, scale, float(global_rate))
    return v * scale[:, None], state
