"""Training loop, metrics and repeated cross-validation."""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .baselines import drop_instance
from .data import BagDataset, fit_standardizer, kfold_split, standardize
from .hooks import AttentionDropHook, PDLHook, SpatialHook, VanillaHook
from .model import MILModel, backward, forward
from .numerics import Rng
from .pdl import Interpolation, ScheduleState, scheduler_value

REGULARIZERS = ("none", "pdl", "vanilla", "spatial", "dropinstance", "attentiondrop")


@dataclass(frozen=True)
class ModelConfig:
    dims: tuple[int, ...] = (256, 128, 64)
    attn_dim: int = 128
    gated: bool = False

    def build(self, in_dim: int, rng: Rng) -> MILModel:
        return MILModel.init(in_dim, self.dims, self.attn_dim, self.gated, rng)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    lr: float = 1e-4
    weight_decay: float = 1e-4
    optimizer: str = "adamw"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    regularizer: str = "none"
    rate: float = 0.0  # baselines: drop rate / DropInstance fraction
    threshold: float = 0.65  # AttentionDrop
    p_max: float = 0.45
    rate_interp: Interpolation = Interpolation()
    schedule_interp: Interpolation = Interpolation()
    progressive: bool = True
    pdl_rescale: bool = True
    standardize: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 2:
            raise ValueError("epochs must be >= 2")
        if not self.lr >= 0:
            raise ValueError("learning rate must be >= 0")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be >= 0")
        if self.optimizer not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"unknown regularizer {self.regularizer!r}; expected one of {REGULARIZERS}")
        if not 0 <= self.p_max < 1:
            raise ValueError("p_max must lie in [0, 1)")
        if not 0 <= self.rate < 1:
            raise ValueError("rate must lie in [0, 1)")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")

    def schedule(self, t: int) -> ScheduleState:
        return ScheduleState(t, self.epochs, self.p_max, self.schedule_interp, self.progressive)


class TrainingError(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(f"{message}: {snapshot}")
        self.snapshot = snapshot


class Adam:
    """Adam with either L2-coupled (``adam``) or decoupled (``adamw``) weight decay.

    Moments live in one flat buffer; parameters are updated in place.
    """

    def __init__(self, params: dict[str, np.ndarray], lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8, decoupled: bool = True):
        self.params = params
        self.lr, self.wd, self.eps, self.decoupled = lr, weight_decay, eps, decoupled
        self.b1, self.b2 = betas
        self.slices = {}
        n = 0
        for k, p in params.items():
            self.slices[k] = slice(n, n + p.size)
            n += p.size
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self._tmp = np.empty(n)
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        if self.lr == 0:
            return
        self.t += 1
        g = np.concatenate([grads[k].ravel() for k in self.params])
        if self.wd and not self.decoupled:
            g += self.wd * np.concatenate([p.ravel() for p in self.params.values()])
        m, v, tmp = self.m, self.v, self._tmp
        m *= self.b1
        np.multiply(g, 1.0 - self.b1, out=tmp)
        m += tmp
        v *= self.b2
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - self.b2
        v += tmp
        # tmp <- lr * m_hat / (sqrt(v_hat) + eps)
        np.sqrt(v, out=tmp)
        tmp *= 1.0 / np.sqrt(1.0 - self.b2**self.t)
        tmp += self.eps
        np.divide(m, tmp, out=tmp)
        tmp *= self.lr / (1.0 - self.b1**self.t)
        shrink = 1.0 - self.lr * self.wd if self.decoupled else 1.0
        for k, p in self.params.items():
            if shrink != 1.0:
                p *= shrink
            p -= tmp[self.slices[k]].reshape(p.shape)


def make_hooks(model: MILModel, config: TrainConfig) -> list:
    n = len(model.projector.weights)
    reg = config.regularizer
    if reg == "pdl":
        return [PDLHook(config.rate_interp, rescale=config.pdl_rescale) for _ in range(n)]
    if reg == "vanilla":
        return [VanillaHook(config.rate) for _ in range(n)]
    if reg == "spatial":
        return [SpatialHook(config.rate) for _ in range(n)]
    if reg == "attentiondrop":
        return [AttentionDropHook(config.threshold) for _ in range(n)]
    return []


@dataclass
class History:
    loss: list[float] = field(default_factory=list)
    global_rate: list[float] = field(default_factory=list)


def train(model: MILModel, dataset: BagDataset, config: TrainConfig, rng: Rng | None = None) -> History:
    """Per-bag AdamW training; updates ``model`` in place."""
    config.validate()
    if len(dataset) == 0:
        raise ValueError("empty training set")
    rng = rng if rng is not None else Rng(config.seed)
    hooks = make_hooks(model, config)
    opt = Adam(model.parameters(), config.lr, config.weight_decay, (config.beta1, config.beta2), config.eps,
               decoupled=config.optimizer == "adamw")
    hist = History()
    for t in range(config.epochs):
        p_t = scheduler_value(config.schedule(t))
        for h in hooks:
            if isinstance(h, PDLHook):
                h.global_rate = p_t
        hist.global_rate.append(p_t if config.regularizer == "pdl" else 0.0)
        erng = rng.fork(f"epoch{t}")
        order = erng.fork("shuffle").permutation(len(dataset))
        total = 0.0
        for step, i in enumerate(order):
            bag = dataset[int(i)]
            brng = erng.fork(step)
            if config.regularizer == "dropinstance":
                bag = drop_instance(bag, config.rate, brng.fork("drop"))
            tr = forward(bag, model, hooks, "train", brng)
            loss, grads = backward(tr, bag.label, model)
            if not math.isfinite(loss):
                raise TrainingError("non-finite loss", {"epoch": t, "bag": bag.id, "logit": tr.logit})
            opt.step(grads)
            total += loss
        hist.loss.append(total / len(dataset))
    return hist


def auc_score(scores, labels) -> float:
    """Mann-Whitney AUC with average ranks for ties; NaN if a class is missing."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    pos = labels == 1
    n1 = int(pos.sum())
    n0 = labels.size - n1
    if n1 == 0 or n0 == 0:
        return float("nan")
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


@dataclass
class Metrics:
    accuracy: float
    auc: float
    n: int


def predict(model: MILModel, dataset: BagDataset) -> np.ndarray:
    return np.array([forward(b, model, mode="eval").prob for b in dataset.bags])


def evaluate(model: MILModel, dataset: BagDataset) -> Metrics:
    probs = predict(model, dataset)
    y = dataset.labels
    acc = float(np.mean((probs >= 0.5).astype(np.int64) == y))
    return Metrics(acc, auc_score(probs, y), len(dataset))


def localization_score(model: MILModel, dataset: BagDataset) -> float:
    """AUC of aggregator attention against instance labels over all positive bags."""
    att, lab = [], []
    for b in dataset.bags:
        if b.label == 1 and b.instance_labels is not None:
            att.append(forward(b, model, mode="eval").alpha)
            lab.append(b.instance_labels)
    if not att:
        return float("nan")
    return auc_score(np.concatenate(att), np.concatenate(lab))


def top_attention_hit_rate(model: MILModel, dataset: BagDataset) -> float:
    """Share of labeled positive bags whose most attended instance is a positive instance."""
    hits = [b.instance_labels[int(np.argmax(forward(b, model, mode="eval").alpha))]
            for b in dataset.bags if b.label == 1 and b.instance_labels is not None]
    return float(np.mean(hits)) if hits else float("nan")


def run_seed(base_seed: int, *labels) -> int:
    r = Rng(base_seed)
    for lab in labels:
        r = r.fork(lab)
    return int(r.integers(0, 2**31 - 1))


def fit(dataset: BagDataset, config: TrainConfig, model_config: ModelConfig, seed: int):
    """Fresh model trained on ``dataset``; returns (model, history, input normalizer or None)."""
    norm = fit_standardizer(dataset) if config.standardize else None
    tr = standardize(dataset, norm)
    rng = Rng(seed)
    model = model_config.build(dataset.feature_dim, rng.fork("init"))
    hist = train(model, tr, config, rng.fork("train"))
    return model, hist, norm


def fit_and_score(dataset: BagDataset, train_idx, test_idx, config: TrainConfig, model_config: ModelConfig,
                  seed: int) -> dict:
    """Train a fresh model on ``train_idx`` and score it on ``test_idx``."""
    model, hist, norm = fit(dataset.subset(train_idx), config, model_config, seed)
    tr = standardize(dataset.subset(train_idx), norm)
    te = standardize(dataset.subset(test_idx), norm)
    m = evaluate(model, te)
    train_m = evaluate(model, tr)
    return {
        "accuracy": m.accuracy,
        "auc": m.auc,
        "localization": localization_score(model, te),
        "train_accuracy": train_m.accuracy,
        "epoch_loss": hist.loss,
        "epoch_global_rate": hist.global_rate,
        "n_train": len(tr),
        "n_test": len(te),
    }


def _run_job(job):
    dataset, train_idx, test_idx, config, model_config, seed, meta = job
    rec = dict(meta)
    rec["seed"] = seed
    rec.update(fit_and_score(dataset, train_idx, test_idx, config, model_config, seed))
    return rec


def _nanmean(a):
    a = np.asarray(a, dtype=np.float64)
    return float(np.nanmean(a)) if np.any(~np.isnan(a)) else float("nan")


def _nanstd(a):
    a = np.asarray(a, dtype=np.float64)
    return float(np.nanstd(a)) if np.any(~np.isnan(a)) else float("nan")


def summarize(records: list[dict], repeats: int) -> dict:
    """Mean and two std decompositions: over all runs, and over per-repeat means."""
    out = {"runs": len(records)}
    for key in ("accuracy", "auc", "localization"):
        vals = [r[key] for r in records]
        per_rep = [_nanmean([r[key] for r in records if r["repeat"] == i]) for i in range(repeats)]
        out[f"{key}_mean"] = _nanmean(vals)
        out[f"{key}_std"] = _nanstd(vals)
        out[f"{key}_std_of_repeat_means"] = _nanstd(per_rep)
    return out


@dataclass
class CVResult:
    records: list[dict]
    summary: dict


def run_cv_experiment(dataset: BagDataset, config: TrainConfig, model_config: ModelConfig = ModelConfig(),
                      k: int = 10, repeats: int = 5, workers: int = 1) -> CVResult:
    """``repeats`` x ``k``-fold CV; every run gets a seed derived from (seed, repeat, fold)."""
    config.validate()
    jobs = []
    for r in range(repeats):
        folds = kfold_split(dataset, k, run_seed(config.seed, "split", r))
        for f, (tr_idx, te_idx) in enumerate(folds):
            meta = {"run_id": f"r{r}f{f}", "repeat": r, "fold": f}
            jobs.append((dataset, tr_idx, te_idx, config, model_config, run_seed(config.seed, "run", r, f), meta))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            records = list(ex.map(_run_job, jobs))
    else:
        records = [_run_job(j) for j in jobs]
    return CVResult(records, summarize(records, repeats))
