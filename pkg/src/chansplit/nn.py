"""LSTM layers, linear head and parameter (de)serialisation built on :mod:`chansplit.autograd`.

All activations are batch-first: a sequence is ``(B, T, D)`` and a hidden
state is ``(B, H)``. Unbatched inputs (``(T, D)`` / ``(D,)``) are accepted by
the public helpers and promoted to a batch of one.
"""
from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import autograd as ag
from .autograd import DimensionError, Tensor

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class LstmLayerParams:
    """One LSTM layer; gate rows are ordered (input, forget, cell candidate, output)."""

    W_ih: Tensor
    W_hh: Tensor
    b: Tensor

    def __post_init__(self):
        rows, d = self.W_ih.shape
        if rows % 4:
            raise DimensionError(f"W_ih must have 4H rows, got {rows}")
        h = rows // 4
        if self.W_hh.shape != (4 * h, h):
            raise DimensionError(f"W_hh must be {(4 * h, h)}, got {self.W_hh.shape}")
        if self.b.shape != (4 * h,):
            raise DimensionError(f"b must be {(4 * h,)}, got {self.b.shape}")

    @property
    def H(self) -> int:
        return self.W_hh.shape[1]

    @property
    def D(self) -> int:
        return self.W_ih.shape[1]

    def parameters(self) -> List[Tensor]:
        return [self.W_ih, self.W_hh, self.b]


@dataclass
class LstmStackParams:
    """A stack of LSTM layers with an optional scalar linear head on the last hidden state."""

    layers: List[LstmLayerParams]
    fc_W: Optional[Tensor] = None
    fc_b: Optional[Tensor] = None

    def __post_init__(self):
        if not self.layers:
            raise ValueError("an LSTM stack needs at least one layer")
        for prev, cur in zip(self.layers, self.layers[1:]):
            if cur.D != prev.H:
                raise DimensionError(f"layer input width {cur.D} != previous hidden size {prev.H}")
        if (self.fc_W is None) != (self.fc_b is None):
            raise ValueError("fc_W and fc_b must be given together")
        if self.fc_W is not None:
            if self.fc_W.shape != (1, self.H) or self.fc_b.shape != (1,):
                raise DimensionError(
                    f"fc head must be (1, {self.H}) + (1,), got {self.fc_W.shape} + {self.fc_b.shape}"
                )

    @property
    def H(self) -> int:
        return self.layers[-1].H

    @property
    def D(self) -> int:
        return self.layers[0].D

    @property
    def has_head(self) -> bool:
        return self.fc_W is not None

    def parameters(self) -> List[Tensor]:
        out = [p for layer in self.layers for p in layer.parameters()]
        if self.has_head:
            out += [self.fc_W, self.fc_b]
        return out

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for i, layer in enumerate(self.layers):
            yield f"{prefix}layer{i}.W_ih", layer.W_ih
            yield f"{prefix}layer{i}.W_hh", layer.W_hh
            yield f"{prefix}layer{i}.b", layer.b
        if self.has_head:
            yield f"{prefix}fc.W", self.fc_W
            yield f"{prefix}fc.b", self.fc_b

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _as_batch(t: Tensor) -> Tuple[Tensor, bool]:
    if t.values.ndim == 1:
        return ag.reshape(t, (1, t.shape[0])), True
    return t, False


def _cell(x: Tensor, h: Tensor, c: Tensor, W_ihT: Tensor, W_hhT: Tensor, b: Tensor, H: int):
    gates = ag.add_bias(ag.add(ag.matmul(x, W_ihT), ag.matmul(h, W_hhT)), b)
    i = ag.sigmoid(ag.slice_cols(gates, 0, H))
    f = ag.sigmoid(ag.slice_cols(gates, H, 2 * H))
    g = ag.tanh(ag.slice_cols(gates, 2 * H, 3 * H))
    o = ag.sigmoid(ag.slice_cols(gates, 3 * H, 4 * H))
    c_t = ag.add(ag.mul(f, c), ag.mul(i, g))
    h_t = ag.mul(o, ag.tanh(c_t))
    return h_t, c_t


def lstm_cell(x_t: Tensor, h_prev: Tensor, c_prev: Tensor, p: LstmLayerParams) -> Tuple[Tensor, Tensor]:
    """One LSTM step. Accepts ``(D,)``/``(H,)`` vectors or ``(B, D)``/``(B, H)`` batches."""
    x, squeeze = _as_batch(x_t)
    h, _ = _as_batch(h_prev)
    c, _ = _as_batch(c_prev)
    if x.shape[1] != p.D:
        raise DimensionError(f"lstm_cell: input width {x.shape[1]} != layer input size {p.D}")
    if h.shape != (x.shape[0], p.H) or c.shape != h.shape:
        raise DimensionError(
            f"lstm_cell: state shapes {h.shape}/{c.shape} do not match batch {x.shape[0]} x H={p.H}"
        )
    h_t, c_t = _cell(x, h, c, ag.transpose(p.W_ih), ag.transpose(p.W_hh), p.b, p.H)
    if squeeze:
        return ag.reshape(h_t, (p.H,)), ag.reshape(c_t, (p.H,))
    return h_t, c_t


def lstm_layer_forward(inputs: Sequence[Tensor], p: LstmLayerParams) -> List[Tensor]:
    """Run one layer over a list of ``(B, D)`` step inputs from zero state; return all hidden states."""
    if not inputs:
        raise ValueError("lstm_layer_forward: empty sequence")
    B = inputs[0].shape[0]
    h = Tensor(np.zeros((B, p.H)))
    c = Tensor(np.zeros((B, p.H)))
    W_ihT, W_hhT = ag.transpose(p.W_ih), ag.transpose(p.W_hh)
    out = []
    for x in inputs:
        if x.shape != (B, p.D):
            raise DimensionError(f"step input {x.shape} != {(B, p.D)}")
        h, c = _cell(x, h, c, W_ihT, W_hhT, p.b, p.H)
        out.append(h)
    return out


def sequence_steps(seq) -> List[Tensor]:
    """Split a ``(B, T, D)`` array (or ``(T, D)`` for one sample) into T constant step tensors."""
    arr = seq.values if isinstance(seq, Tensor) else np.asarray(seq, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise DimensionError(f"sequence must be (B, T, D) or (T, D), got {arr.shape}")
    if arr.shape[1] < 1:
        raise ValueError("sequence must contain at least one time step")
    return [Tensor(np.ascontiguousarray(arr[:, t, :])) for t in range(arr.shape[1])]


def lstm_stack_forward(
    seq, stack: Sequence[LstmLayerParams]
) -> Tuple[List[List[Tensor]], List[Tensor]]:
    """Run a stack of layers from zero state.

    ``seq`` is either a ``(B, T, D)``/``(T, D)`` array or a list of ``(B, D)``
    step tensors. Returns ``(hidden_seq per layer, final_h per layer)``.
    """
    steps = list(seq) if isinstance(seq, (list, tuple)) else sequence_steps(seq)
    if not steps:
        raise ValueError("lstm_stack_forward: empty sequence")
    hidden_seqs, finals = [], []
    for layer in stack:
        steps = lstm_layer_forward(steps, layer)
        hidden_seqs.append(steps)
        finals.append(steps[-1])
    return hidden_seqs, finals


def fc(h: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Scalar linear head ``W.h + b``; returns shape ``()`` for a vector, ``(B,)`` for a batch."""
    if W.values.ndim != 2 or W.shape[0] != 1 or b.shape != (1,):
        raise DimensionError(f"fc: expected W (1, H) and b (1,), got {W.shape} and {b.shape}")
    if h.shape[-1] != W.shape[1]:
        raise DimensionError(f"fc: input width {h.shape[-1]} != head width {W.shape[1]}")
    hb, squeeze = _as_batch(h)
    out = ag.add_bias(ag.matmul(hb, ag.transpose(W)), b)
    return ag.reshape(out, () if squeeze else (hb.shape[0],))


def init_layer(D: int, H: int, rng: np.random.Generator) -> LstmLayerParams:
    bound = 1.0 / np.sqrt(H)
    u = lambda *shape: Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)  # noqa: E731
    return LstmLayerParams(W_ih=u(4 * H, D), W_hh=u(4 * H, H), b=u(4 * H))


def init_params(
    input_size: int,
    hidden_size: int,
    num_layers: int,
    head: bool = True,
    seed=0,
) -> LstmStackParams:
    """Uniform(-1/sqrt(H), 1/sqrt(H)) initialisation, deterministic given ``seed``.

    ``seed`` may be an int, a :class:`numpy.random.SeedSequence` or a Generator.
    """
    for name, v in (("input_size", input_size), ("hidden_size", hidden_size), ("num_layers", num_layers)):
        if int(v) != v or v <= 0:
            raise ValueError(f"{name} must be a positive integer, got {v!r}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    layers = [init_layer(input_size if i == 0 else hidden_size, hidden_size, rng) for i in range(num_layers)]
    if not head:
        return LstmStackParams(layers)
    bound = 1.0 / np.sqrt(hidden_size)
    fc_W = Tensor(rng.uniform(-bound, bound, size=(1, hidden_size)), requires_grad=True)
    fc_b = Tensor(rng.uniform(-bound, bound, size=(1,)), requires_grad=True)
    return LstmStackParams(layers, fc_W, fc_b)


def snapshot(params: Sequence[Tensor]) -> List[np.ndarray]:
    return [p.values.copy() for p in params]


def restore(params: Sequence[Tensor], values: Sequence[np.ndarray]) -> None:
    for p, v in zip(params, values):
        p.values = v.copy()


def save_checkpoint(path, named: Sequence[Tuple[str, Tensor]], kind: str = "baseline", meta: Optional[dict] = None) -> None:
    """Write named tensors to an ``.npz`` with a format version and model-kind tag.

    The write goes to a temporary file that is renamed into place.
    """
    arrays = {name: t.values for name, t in named}
    arrays["__format_version__"] = np.array(CHECKPOINT_FORMAT_VERSION)
    arrays["__kind__"] = np.array(kind)
    for k, v in (meta or {}).items():
        arrays[f"__meta_{k}__"] = np.array(v)
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".npz")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Tuple[str, dict]:
    """Return ``(kind, {name: ndarray})``."""
    with np.load(path, allow_pickle=False) as z:
        version = int(z["__format_version__"])
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {version}")
        kind = str(z["__kind__"])
        arrays = {k: z[k] for k in z.files if not k.startswith("__")}
    return kind, arrays


def assign(named: Sequence[Tuple[str, Tensor]], arrays: dict) -> None:
    """Copy loaded arrays into existing tensors, checking names and shapes."""
    for name, t in named:
        if name not in arrays:
            raise KeyError(f"checkpoint is missing {name!r}")
        if arrays[name].shape != t.shape:
            raise DimensionError(f"{name}: checkpoint shape {arrays[name].shape} != {t.shape}")
        t.values = np.array(arrays[name], dtype=np.float64)
