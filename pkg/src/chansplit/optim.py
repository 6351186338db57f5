"""Adam, the training loops for single-device and multi-device split models, and evaluation."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autograd as ag
from . import nn
from .autograd import Tensor
from .channel import ChannelConfig, ChannelLayer
from .splitmodel import (
    HetSplitModel,
    SplitModel,
    edge_forward,
    ee_forward,
    het_forward,
    loss_ee,
    loss_het,
    loss_mse,
    server_forward,
    split_forward,
)

logger = logging.getLogger(__name__)

EVAL_CHUNK = 1024


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class AdamState:
    params: List[Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p.values) for p in self.params]
            self.v = [np.zeros_like(p.values) for p in self.params]


def adam_step(params: Sequence[Tensor], state: AdamState, grads: Optional[Sequence[np.ndarray]] = None) -> None:
    """One bias-corrected Adam update in place. Gradients default to ``p.grad``."""
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(state.m):
        raise ValueError(f"{len(grads)} gradients for {len(state.m)} tracked parameters")
    for i, g in enumerate(grads):
        if g is None:
            raise ValueError(f"parameter {i} {params[i].shape} has no gradient")
        if g.shape != params[i].shape:
            raise ValueError(f"gradient {i} shape {g.shape} != parameter shape {params[i].shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.values = p.values - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
    if total > max_norm > 0:
        k = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * k
    return total


@dataclass
class TrainConfig:
    channel: ChannelConfig = field(default_factory=ChannelConfig.none)
    lam: float = 0.5
    seed: int = 0
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 200
    patience: int = 10
    clip_norm: Optional[float] = None
    divergence_threshold: float = 1e3
    val_repeats: int = 1

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be positive")


@dataclass
class TrainReport:
    seed: int
    train_loss: List[float] = field(default_factory=list)
    val_mse: List[float] = field(default_factory=list)
    best_epoch: int = -1
    diverged_epoch: Optional[int] = None
    val_branch_mse: dict = field(default_factory=dict)
    wall_time: float = field(default=0.0, compare=False)

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    @property
    def best_val_mse(self) -> float:
        return self.val_mse[self.best_epoch]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["epochs"] = self.epochs
        return d


def _streams(seed: int):
    shuffle, channel, val = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(shuffle), np.random.default_rng(channel), val)


def _check_split(name: str, part) -> Tuple[np.ndarray, np.ndarray]:
    X, y = part
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim == 2:
        X = X[:, :, None]
    if y.size == 0:
        raise ValueError(f"{name} split is empty")
    if X.shape[0] != y.size:
        raise ValueError(f"{name} split: {X.shape[0]} windows but {y.size} labels")
    return X, y


def _parts(dataset):
    if hasattr(dataset, "train"):
        return dataset.train, dataset.val
    return dataset


def predict(model: SplitModel, X, channel: ChannelLayer, branch: str = "server") -> np.ndarray:
    """Forward-only predictions in chunks; ``branch`` is ``server`` or ``early_exit``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[:, :, None]
    out = []
    with ag.no_grad():
        for lo in range(0, X.shape[0], EVAL_CHUNK):
            z = edge_forward(X[lo : lo + EVAL_CHUNK], model.edge)
            if branch == "server":
                out.append(server_forward(channel(z), model.server).values)
            elif branch == "early_exit":
                out.append(ee_forward(z, model.ee_head).values)
            else:
                raise ValueError(f"unknown branch {branch!r}")
    return np.concatenate(out)


def evaluate(
    model: Union[SplitModel, HetSplitModel],
    test_set,
    channel_cfg: ChannelConfig,
    rng: Optional[np.random.Generator] = None,
    repeats: int = 10,
    branch: str = "server",
    device: int = 0,
) -> float:
    """Test MSE averaged over ``repeats`` independent channel draws.

    Deterministic channels (none, p=0) and the early-exit branch use a single pass.
    For a :class:`HetSplitModel` ``device`` picks the edge stack.
    """
    X, y = _check_split("test", test_set)
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    if isinstance(model, HetSplitModel):
        model = SplitModel(model.edges[device], model.server, model.channel)
    channel_cfg.check_width(model.M)
    stochastic = branch == "server" and (
        (channel_cfg.kind == "erasure" and channel_cfg.p > 0) or channel_cfg.kind == "awgn2"
    )
    n = repeats if stochastic else 1
    rng = rng if rng is not None else np.random.default_rng(0)
    layer = ChannelLayer(channel_cfg, rng)
    total = 0.0
    for _ in range(n):
        pred = predict(model, X, layer, branch)
        total += float(np.mean((pred - y) ** 2))
    return total / n


def _val_metric(model: SplitModel, val, cfg: TrainConfig, seed_seq) -> dict:
    rng = np.random.default_rng(seed_seq)
    layer = ChannelLayer(cfg.channel, rng)
    X, y = val
    total_server = 0.0
    for _ in range(cfg.val_repeats):
        total_server += float(np.mean((predict(model, X, layer) - y) ** 2))
    out = {"server": total_server / cfg.val_repeats}
    if model.ee_head is not None:
        out["early_exit"] = float(np.mean((predict(model, X, layer, "early_exit") - y) ** 2))
        out["objective"] = cfg.lam * out["server"] + (1.0 - cfg.lam) * out["early_exit"]
    else:
        out["objective"] = out["server"]
    return out


def _bad(loss: float, threshold: float) -> bool:
    return not math.isfinite(loss) or loss > threshold


def train(model: SplitModel, dataset, cfg: TrainConfig) -> TrainReport:
    """Mini-batch Adam with the training channel active and early stopping on validation.

    The parameters with the best validation objective are restored at the end.
    With an early-exit head the objective is the lambda-weighted loss.
    """
    train_part, val_part = _parts(dataset)
    Xtr, ytr = _check_split("train", train_part)
    Xval, yval = _check_split("validation", val_part)
    cfg.channel.check_width(model.M)
    params = model.parameters()
    state = AdamState(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    shuffle_rng, channel_rng, val_seq = _streams(cfg.seed)
    layer = ChannelLayer(cfg.channel, channel_rng)
    report = TrainReport(seed=cfg.seed)
    best, best_obj, stale = nn.snapshot(params), math.inf, 0
    t0 = time.perf_counter()
    n = ytr.size
    for epoch in range(cfg.max_epochs):
        order = shuffle_rng.permutation(n)
        total, seen = 0.0, 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            y = Tensor(ytr[idx])
            y_hat, y_ee = split_forward(model, Xtr[idx], layer)
            loss = loss_ee(y, y_hat, y_ee, cfg.lam) if y_ee is not None else loss_mse(y, y_hat)
            lv = loss.item()
            if _bad(lv, cfg.divergence_threshold):
                report.diverged_epoch = epoch
                break
            zero_grad(params)
            loss.backward()
            if cfg.clip_norm:
                clip_grad_norm(params, cfg.clip_norm)
            adam_step(params, state)
            total += lv * idx.size
            seen += idx.size
        if report.diverged_epoch is not None:
            logger.warning("training diverged at epoch %d (seed %d)", epoch, cfg.seed)
            break
        report.train_loss.append(total / seen)
        metrics = _val_metric(model, (Xval, yval), cfg, val_seq)
        report.val_mse.append(metrics["objective"])
        if metrics["objective"] < best_obj:
            best_obj, best, stale = metrics["objective"], nn.snapshot(params), 0
            report.best_epoch = epoch
            report.val_branch_mse = {k: v for k, v in metrics.items() if k != "objective"}
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    nn.restore(params, best)
    zero_grad(params)
    report.wall_time = time.perf_counter() - t0
    return report


def train_het(het: HetSplitModel, datasets: Sequence, cfg: TrainConfig) -> TrainReport:
    """Joint training of all edges and the shared server on the summed per-device loss.

    Each step draws ``batch_size // C`` windows from every device. The epoch
    ends when the smallest device's data is exhausted.
    """
    if not datasets:
        raise ValueError("train_het needs at least one device dataset")
    if len(datasets) != het.C:
        raise ValueError(f"{len(datasets)} datasets for {het.C} edge devices")
    parts = [_parts(d) for d in datasets]
    trains = [_check_split(f"device {i} train", p[0]) for i, p in enumerate(parts)]
    vals = [_check_split(f"device {i} validation", p[1]) for i, p in enumerate(parts)]
    cfg.channel.check_width(het.M)
    C = het.C
    per_dev = max(1, cfg.batch_size // C)
    params = het.parameters()
    state = AdamState(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    shuffle_rng, channel_rng, val_seq = _streams(cfg.seed)
    layer = ChannelLayer(cfg.channel, channel_rng)
    report = TrainReport(seed=cfg.seed)
    best, best_obj, stale = nn.snapshot(params), math.inf, 0
    t0 = time.perf_counter()
    steps = min(math.ceil(y.size / per_dev) for _, y in trains)
    for epoch in range(cfg.max_epochs):
        orders = [shuffle_rng.permutation(y.size) for _, y in trains]
        total, count = 0.0, 0
        for s in range(steps):
            idxs = [o[s * per_dev : (s + 1) * per_dev] for o in orders]
            if any(i.size == 0 for i in idxs):
                break
            preds = het_forward([X[i] for (X, _), i in zip(trains, idxs)], het, layer)
            loss = loss_het([Tensor(y[i]) for (_, y), i in zip(trains, idxs)], preds)
            lv = loss.item()
            if _bad(lv, cfg.divergence_threshold):
                report.diverged_epoch = epoch
                break
            zero_grad(params)
            loss.backward()
            if cfg.clip_norm:
                clip_grad_norm(params, cfg.clip_norm)
            adam_step(params, state)
            # weight by the mean device batch so C=1 matches train()
            w = sum(i.size for i in idxs) / C
            total += lv * w
            count += w
        if report.diverged_epoch is not None:
            logger.warning("heterogeneous training diverged at epoch %d (seed %d)", epoch, cfg.seed)
            break
        report.train_loss.append(total / max(count, 1))
        per_device = {}
        for i, (edge, val) in enumerate(zip(het.edges, vals)):
            single = SplitModel(edge, het.server, het.channel)
            per_device[f"device{i}"] = _val_metric(single, val, cfg, val_seq)["server"]
        obj = float(sum(per_device.values()))
        report.val_mse.append(obj)
        if obj < best_obj:
            best_obj, best, stale = obj, nn.snapshot(params), 0
            report.best_epoch = epoch
            report.val_branch_mse = per_device
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    nn.restore(params, best)
    zero_grad(params)
    report.wall_time = time.perf_counter() - t0
    return report
