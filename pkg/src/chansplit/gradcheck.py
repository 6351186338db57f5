"""Central finite-difference checks of the backward pass.

The error measure is per parameter tensor, ``||analytic - numeric|| /
max(||analytic||, ||numeric||, 1e-12)``; element-wise relative error is
meaningless for entries that are zero up to roundoff.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import autograd as ag
from . import nn
from .autograd import Tensor
from .channel import ChannelConfig, FrozenChannelLayer
from .splitmodel import build_het_model, build_split_model, het_forward, loss_ee, loss_het, loss_mse, split_forward

STEP = 1e-5
TOLERANCE = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float = TOLERANCE

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tolerance


def numeric_grad(f: Callable[[], float], t: Tensor, h: float = STEP) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. every entry of ``t`` (perturbed in place)."""
    g = np.zeros_like(t.values)
    base = t.values
    for idx in np.ndindex(base.shape):
        orig = base[idx]
        plus = base.copy()
        plus[idx] = orig + h
        t.values = plus
        fp = f()
        minus = base.copy()
        minus[idx] = orig - h
        t.values = minus
        fm = f()
        g[idx] = (fp - fm) / (2 * h)
    t.values = base
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check(build_loss: Callable[[], Tensor], params: Sequence[Tensor], h: float = STEP) -> List[float]:
    """Relative error of backward vs finite differences for each tensor in ``params``."""
    for p in params:
        p.grad = None
    loss = build_loss()
    loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.values) for p in params]
    f = lambda: build_loss().item()  # noqa: E731
    return [rel_error(a, numeric_grad(f, p, h)) for a, p in zip(analytic, params)]


def _rand(rng, *shape, requires_grad=True) -> Tensor:
    return Tensor(rng.uniform(-1, 1, size=shape), requires_grad=requires_grad)


def op_checks(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    a, b = _rand(rng, 3, 4), _rand(rng, 4, 2)
    out.append(CheckResult("matmul", max(check(lambda: ag.sum(ag.matmul(a, b)), [a, b]))))
    x, y = _rand(rng, 2, 3), _rand(rng, 2, 3)
    w = Tensor(rng.uniform(-1, 1, size=(2, 3)))
    for name in ("add", "sub", "mul"):
        out.append(CheckResult(name, max(check(
            lambda name=name: ag.sum(ag.mul(ag.elementwise(name, x, y), w)), [x, y]))))
    for name in ("tanh", "sigmoid", "square"):
        out.append(CheckResult(name, max(check(
            lambda name=name: ag.sum(ag.mul(ag.elementwise(name, x), w)), [x]))))
    bias = _rand(rng, 3)
    out.append(CheckResult("add_bias", max(check(lambda: ag.sum(ag.mul(ag.add_bias(x, bias), w)), [x, bias]))))
    out.append(CheckResult("mean", max(check(lambda: ag.mean(ag.mul(x, w)), [x]))))
    c1, c2 = _rand(rng, 1, 3), _rand(rng, 2, 3)
    w3 = Tensor(rng.uniform(-1, 1, size=(3, 3)))
    out.append(CheckResult("concat", max(check(lambda: ag.sum(ag.mul(ag.concat([c1, c2], 0), w3)), [c1, c2]))))
    out.append(CheckResult("slice/transpose", max(check(
        lambda: ag.sum(ag.square(ag.transpose(ag.slice_cols(x, 1, 3)))), [x]))))
    return out


def lstm_checks(seed: int = 0, H: int = 3, D: int = 2, T: int = 4, batch: int = 3) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    layer = nn.init_layer(D, H, rng)
    x, h0, c0 = _rand(rng, batch, D), _rand(rng, batch, H), _rand(rng, batch, H)
    errs = check(lambda: ag.sum(nn.lstm_cell(x, h0, c0, layer)[0]), layer.parameters() + [x, h0, c0])
    out = [CheckResult("lstm_cell", max(errs))]
    stack = nn.init_params(D, H, 3, head=True, seed=rng)
    seq = rng.uniform(-1, 1, size=(batch, T, D))
    y = rng.uniform(-1, 1, size=batch)

    def loss():
        _, finals = nn.lstm_stack_forward(seq, stack.layers)
        return loss_mse(y, nn.fc(finals[-1], stack.fc_W, stack.fc_b))

    out.append(CheckResult("lstm_stack+fc mse", max(check(loss, stack.parameters()))))
    return out


def split_model_checks(seed: int = 0, M: int = 4, T: int = 5, batch: int = 3, server_layers: int = 2,
                       lam: float = 0.3) -> List[CheckResult]:
    """Split model gradients under a frozen erasure mask and frozen two-state noise."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, size=(batch, T, 1))
    y = rng.uniform(-1, 1, size=batch)
    m2 = M // 2
    channels = {
        "none": ChannelConfig.none(),
        "erasure": ChannelConfig.erasure(0.4),
        "awgn2": ChannelConfig.awgn2(5.0, M - m2, m2),
    }
    out = []
    for cname, ch in channels.items():
        model = build_split_model(M, 1, server_layers, early_exit=True, channel=ch, seed=rng)
        layer = FrozenChannelLayer(ch, np.random.default_rng(seed + 1))

        def run(kind):
            layer.rewind()
            y_hat, y_ee = split_forward(model, X, layer)
            return loss_mse(y, y_hat) if kind == "mse" else loss_ee(y, y_hat, y_ee, lam)

        run("mse")  # draw the realisation before any parameter is perturbed
        params = model.edge.parameters() + model.server.parameters()
        out.append(CheckResult(f"split {cname} loss_mse", max(check(lambda: run("mse"), params))))
        out.append(CheckResult(f"split {cname} loss_ee", max(check(lambda: run("ee"), model.parameters()))))
    return out


def het_checks(seed: int = 0, M: int = 4, T: int = 4, batch: int = 2) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    het = build_het_model(M, (1, 2), 2, channel=ChannelConfig.erasure(0.3), seed=rng)
    Xs = [rng.uniform(-1, 1, size=(batch, T, 1)) for _ in range(2)]
    ys = [rng.uniform(-1, 1, size=batch) for _ in range(2)]
    layer = FrozenChannelLayer(het.channel, np.random.default_rng(seed + 1))

    def run():
        layer.rewind()
        return loss_het(ys, het_forward(Xs, het, layer))

    run()
    return [CheckResult("heterogeneous loss_het", max(check(run, het.parameters())))]


def run_all(seed: int = 0) -> List[CheckResult]:
    return op_checks(seed) + lstm_checks(seed) + split_model_checks(seed) + split_model_checks(
        seed, server_layers=3) + het_checks(seed)
