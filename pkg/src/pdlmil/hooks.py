"""Dropout hooks applied after each middle-layer activation.

A hook returns a multiplier broadcastable to the K x C activation; the
backward pass reuses the same multiplier, so masks act as constants.
"""
from __future__ import annotations

import numpy as np

from . import baselines
from .numerics import Rng
from .pdl import Interpolation, pdl_forward


class DropoutHook:
    def __call__(self, h: np.ndarray, rng: Rng) -> tuple[np.ndarray, dict]:
        raise NotImplementedError


class PDLHook(DropoutHook):
    """Progressive dropout. ``global_rate`` is set by the trainer every epoch."""

    def __init__(self, interp: Interpolation = Interpolation(), global_rate: float = 0.0, rescale: bool = True):
        self.interp = interp
        self.global_rate = global_rate
        self.rescale = rescale

    def __call__(self, h, rng):
        _, state = pdl_forward(h, self.global_rate, rng, "train", self.interp, self.rescale)
        info = {"apba": state.attention, "rates": state.assigned_rates, "mask": state.mask,
                "global_rate": state.global_rate}
        return state.scale[:, None], info


class VanillaHook(DropoutHook):
    def __init__(self, p: float):
        self.p = p

    def __call__(self, h, rng):
        return baselines.vanilla_mask(h.shape, self.p, rng), {}


class SpatialHook(DropoutHook):
    def __init__(self, p: float):
        self.p = p

    def __call__(self, h, rng):
        return baselines.spatial_mask(h.shape, self.p, rng), {}


class AttentionDropHook(DropoutHook):
    def __init__(self, threshold: float = 0.65):
        self.threshold = threshold

    def __call__(self, h, rng):
        return baselines.attention_drop_mask(h, self.threshold), {}


class FrozenHook(DropoutHook):
    """Replays a recorded multiplier; used for gradient checks on a masked network."""

    def __init__(self, multiplier):
        self.multiplier = np.asarray(multiplier, dtype=np.float64)

    def __call__(self, h, rng):
        return self.multiplier, {}
