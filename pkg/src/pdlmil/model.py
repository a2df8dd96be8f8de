"""Middle-layer projector, attention aggregators and bag classifier.

Forward and backward are written out by hand. The loss is binary
cross-entropy on the sigmoid bag probability; dropout multipliers recorded
in the forward trace are treated as constants.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Rng, sigmoid, softplus, stable_softmax

FORMAT_VERSION = "pdlmil-params/1"


@dataclass
class ProjectorParams:
    weights: list[np.ndarray]  # each [out x in]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ValueError("weights and biases differ in length")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: bias shape {b.shape} does not match weight {w.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i}: input dim {w.shape[1]} does not chain from {self.weights[i - 1].shape[0]}")

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]


@dataclass
class AggregatorParams:
    w1: np.ndarray  # D x 1
    w2: np.ndarray  # D x L
    cls_w: np.ndarray  # L
    cls_b: np.ndarray  # scalar held as shape (1,)
    u2: np.ndarray | None = None  # D x L, gated variant only

    @property
    def gated(self) -> bool:
        return self.u2 is not None

    def __post_init__(self):
        D, L = self.w2.shape
        if D < 1 or L < 1:
            raise ValueError("attention dims must be positive")
        if self.w1.shape != (D, 1):
            raise ValueError(f"w1 must be {D}x1, got {self.w1.shape}")
        if self.u2 is not None and self.u2.shape != (D, L):
            raise ValueError(f"u2 must be {D}x{L}, got {self.u2.shape}")
        if self.cls_w.shape != (L,):
            raise ValueError(f"classifier weight must have length {L}")


@dataclass
class MILModel:
    projector: ProjectorParams
    aggregator: AggregatorParams

    def __post_init__(self):
        L = self.aggregator.w2.shape[1]
        if self.projector.weights and self.projector.out_dim != L:
            raise ValueError(f"projector output dim {self.projector.out_dim} != aggregator input dim {L}")

    @classmethod
    def init(cls, in_dim: int, dims=(256, 128, 64), attn_dim: int = 128, gated: bool = False,
             rng: Rng | None = None) -> "MILModel":
        """He-normal weights, zero biases."""
        rng = rng if rng is not None else Rng(0)
        weights, biases = [], []
        fan_in = in_dim
        for j, out in enumerate(dims):
            weights.append(rng.fork(f"proj{j}").normal((out, fan_in)) * np.sqrt(2.0 / fan_in))
            biases.append(np.zeros(out))
            fan_in = out
        L = fan_in
        w2 = rng.fork("w2").normal((attn_dim, L)) * np.sqrt(2.0 / L)
        w1 = rng.fork("w1").normal((attn_dim, 1)) * np.sqrt(2.0 / attn_dim)
        u2 = rng.fork("u2").normal((attn_dim, L)) * np.sqrt(2.0 / L) if gated else None
        cls_w = rng.fork("cls").normal(L) * np.sqrt(2.0 / L)
        agg = AggregatorParams(w1=w1, w2=w2, cls_w=cls_w, cls_b=np.zeros(1), u2=u2)
        return cls(ProjectorParams(weights, biases), agg)

    def parameters(self) -> dict[str, np.ndarray]:
        """Name -> array, by reference. Order is stable."""
        out = {}
        for i, (w, b) in enumerate(zip(self.projector.weights, self.projector.biases)):
            out[f"proj.{i}.weight"] = w
            out[f"proj.{i}.bias"] = b
        a = self.aggregator
        out["attn.w1"] = a.w1
        out["attn.w2"] = a.w2
        if a.u2 is not None:
            out["attn.u2"] = a.u2
        out["cls.weight"] = a.cls_w
        out["cls.bias"] = a.cls_b
        return out

    def copy(self) -> "MILModel":
        p = self.projector
        a = self.aggregator
        return MILModel(
            ProjectorParams([w.copy() for w in p.weights], [b.copy() for b in p.biases]),
            AggregatorParams(a.w1.copy(), a.w2.copy(), a.cls_w.copy(), a.cls_b.copy(),
                             None if a.u2 is None else a.u2.copy()),
        )

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters().values()])

    def set_flat(self, vec) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        i = 0
        for p in self.parameters().values():
            n = p.size
            p[...] = vec[i:i + n].reshape(p.shape)
            i += n
        if i != vec.size:
            raise ValueError("flat vector length does not match parameter count")


def project(x, projector: ProjectorParams, hooks=(), mode: str = "train", rng: Rng | None = None,
            trace: dict | None = None) -> list[np.ndarray]:
    """Run the middle layers; returns each layer's (post-hook) embedding."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("bag must hold at least one instance")
    if len(hooks) > len(projector.weights):
        raise ValueError("more hooks than projector layers")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    outs = []
    a = x
    for j, (w, b) in enumerate(zip(projector.weights, projector.biases)):
        if a.shape[1] != w.shape[1]:
            raise ValueError(f"layer {j}: input has {a.shape[1]} features, weight expects {w.shape[1]}")
        z = a @ w.T + b
        h = np.maximum(z, 0.0)
        mult, info = None, {}
        if mode == "train" and j < len(hooks) and hooks[j] is not None:
            mult, info = hooks[j](h, rng.fork(j) if rng is not None else Rng(0).fork(j))
            a = h * mult
        else:
            a = h
        if trace is not None:
            trace.setdefault("layers", []).append({"input": outs[-1] if outs else x, "pre": z, "post": h,
                                                   "mult": mult, "hook": info})
        outs.append(a)
    return outs


def _attention_scores(v, agg: AggregatorParams, cache: dict | None = None):
    t = np.tanh(v @ agg.w2.T)
    if agg.u2 is None:
        hmat = t
        g = None
    else:
        g = sigmoid(v @ agg.u2.T)
        hmat = t * g
    s = (hmat @ agg.w1).ravel()
    if cache is not None:
        cache.update(tanh=t, gate=g, hidden=hmat)
    return s


def attention_pool(embeddings, agg: AggregatorParams, cache: dict | None = None):
    """Attention-weighted mean of instance embeddings (gated if ``agg.u2`` is set)."""
    v = np.asarray(embeddings, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] == 0:
        raise ValueError("attention pooling needs at least one instance")
    if v.shape[1] != agg.w2.shape[1]:
        raise ValueError(f"embedding dim {v.shape[1]} != attention input dim {agg.w2.shape[1]}")
    alpha = stable_softmax(_attention_scores(v, agg, cache))
    return alpha @ v, alpha


def gated_attention_pool(embeddings, agg: AggregatorParams, cache: dict | None = None):
    if agg.u2 is None:
        raise ValueError("aggregator has no gate weights")
    return attention_pool(embeddings, agg, cache)


@dataclass
class ForwardTrace:
    x: np.ndarray
    layers: list[dict]
    embeddings: np.ndarray
    alpha: np.ndarray
    bag_embedding: np.ndarray
    logit: float
    prob: float
    attn_cache: dict = field(default_factory=dict)

    @property
    def hook_info(self) -> list[dict]:
        return [layer["hook"] for layer in self.layers]


def forward(x, model: MILModel, hooks=(), mode: str = "eval", rng: Rng | None = None) -> ForwardTrace:
    x = getattr(x, "instances", x)
    tr: dict = {}
    outs = project(x, model.projector, hooks, mode, rng, tr)
    v = outs[-1] if outs else np.asarray(x, dtype=np.float64)
    cache: dict = {}
    m, alpha = attention_pool(v, model.aggregator, cache)
    logit = float(m @ model.aggregator.cls_w + model.aggregator.cls_b[0])
    prob = float(sigmoid(np.array([logit]))[0])
    return ForwardTrace(np.asarray(x, dtype=np.float64), tr.get("layers", []), v, alpha, m, logit, prob, cache)


def bce_loss(logit: float, label: int) -> float:
    return float(softplus(np.array([logit]))[0] - label * logit)


def backward(trace: ForwardTrace, label: int, model: MILModel) -> tuple[float, dict[str, np.ndarray]]:
    """BCE loss and its exact gradient for every parameter, masks held fixed."""
    if label not in (0, 1):
        raise ValueError("bag label must be 0 or 1")
    if not trace.attn_cache or (model.projector.weights and not trace.layers):
        raise ValueError("trace is missing intermediates; run forward first")
    agg = model.aggregator
    grads: dict[str, np.ndarray] = {}
    dlogit = trace.prob - label
    grads["cls.weight"] = dlogit * trace.bag_embedding
    grads["cls.bias"] = np.array([dlogit])
    dm = dlogit * agg.cls_w
    v, alpha = trace.embeddings, trace.alpha
    dv = alpha[:, None] * dm[None, :]
    dalpha = v @ dm
    ds = alpha * (dalpha - alpha @ dalpha)

    c = trace.attn_cache
    t, g, hmat = c["tanh"], c["gate"], c["hidden"]
    grads["attn.w1"] = hmat.T @ ds[:, None]
    dh = ds[:, None] * agg.w1.T  # K x D
    if g is None:
        dt = dh
    else:
        dt = dh * g
        db = dh * t * g * (1.0 - g)
        grads["attn.u2"] = db.T @ v
        dv += db @ agg.u2
    da = dt * (1.0 - t * t)
    grads["attn.w2"] = da.T @ v
    dv += da @ agg.w2

    for j in range(len(trace.layers) - 1, -1, -1):
        layer = trace.layers[j]
        w = model.projector.weights[j]
        dhj = dv if layer["mult"] is None else dv * layer["mult"]
        dz = dhj * (layer["pre"] > 0)
        grads[f"proj.{j}.weight"] = dz.T @ layer["input"]
        grads[f"proj.{j}.bias"] = dz.sum(axis=0)
        dv = dz @ w
    ordered = {k: grads[k] for k in model.parameters()}
    return bce_loss(trace.logit, label), ordered


def save_params(model: MILModel, path, extra: dict[str, np.ndarray] | None = None) -> None:
    """Store parameters as ``.npz``: one row-major array per parameter plus a JSON header.

    The header (key ``__meta__``) records the format version, layer shapes,
    whether the aggregator is gated and the names of any ``extra`` arrays
    (e.g. the input standardization ``norm.mean`` / ``norm.std``).
    """
    params = model.parameters()
    extra = {k: np.asarray(v, dtype=np.float64) for k, v in (extra or {}).items()}
    meta = {
        "format": FORMAT_VERSION,
        "gated": model.aggregator.gated,
        "n_layers": len(model.projector.weights),
        "shapes": {k: list(v.shape) for k, v in params.items()},
        "extra": sorted(extra),
    }
    entries = {"__meta__": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
               **params, **extra}
    # Written by hand with a fixed timestamp so identical models give identical bytes.
    with zipfile.ZipFile(Path(path), "w", zipfile.ZIP_STORED) as zf:
        for name, arr in entries.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_params(path, with_extra: bool = False):
    """Inverse of :func:`save_params`; ``with_extra`` also returns the extra arrays."""
    with np.load(Path(path)) as z:
        if "__meta__" not in z:
            raise ValueError(f"{path}: not a parameter file (no header)")
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("format") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format {meta.get('format')!r}")
        arr = {k: np.array(z[k], dtype=np.float64) for k in meta["shapes"]}
        extra = {k: np.array(z[k], dtype=np.float64) for k in meta.get("extra", [])}
    for k, shape in meta["shapes"].items():
        if list(arr[k].shape) != shape:
            raise ValueError(f"{path}: {k} has shape {arr[k].shape}, header says {shape}")
    n = meta["n_layers"]
    proj = ProjectorParams([arr[f"proj.{i}.weight"] for i in range(n)], [arr[f"proj.{i}.bias"] for i in range(n)])
    agg = AggregatorParams(arr["attn.w1"], arr["attn.w2"], arr["cls.weight"], arr["cls.bias"],
                           arr.get("attn.u2") if meta["gated"] else None)
    model = MILModel(proj, agg)
    return (model, extra) if with_extra else model
