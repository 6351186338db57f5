"""Edge/server split of an LSTM forecaster with a channel layer at the cut.

The edge stack turns a ``(B, N, 1)`` window into ``z``: the last hidden state
of its final layer, so exactly ``M = H`` symbols are sent per sample. The
server reads ``z_hat`` as a length-one sequence and ends in a scalar head.
An optional early-exit head maps the uncorrupted ``z`` to a local estimate.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autograd as ag
from . import nn
from .autograd import DimensionError, Tensor
from .channel import ChannelConfig, ChannelLayer

FORWARD_TO_SERVER = "forward_to_server"
EXIT_LOCALLY = "exit_locally"


@dataclass
class EarlyExitHead:
    W: Tensor
    b: Tensor

    def parameters(self) -> List[Tensor]:
        return [self.W, self.b]


@dataclass
class SplitModel:
    edge: nn.LstmStackParams
    server: nn.LstmStackParams
    channel: ChannelConfig = field(default_factory=ChannelConfig.none)
    ee_head: Optional[EarlyExitHead] = None

    def __post_init__(self):
        if self.edge.has_head:
            raise ValueError("the edge stack must not carry an fc head")
        if not self.server.has_head:
            raise ValueError("the server stack needs an fc head")
        if self.server.D != self.edge.H:
            raise DimensionError(f"server input width {self.server.D} != edge output width {self.edge.H}")
        if self.ee_head is not None and self.ee_head.W.shape != (1, self.M):
            raise DimensionError(f"early-exit head must be (1, {self.M}), got {self.ee_head.W.shape}")
        self.channel.check_width(self.M)

    @property
    def M(self) -> int:
        return self.edge.H

    @property
    def kind(self) -> str:
        return "early_exit" if self.ee_head is not None else "baseline"

    def parameters(self) -> List[Tensor]:
        out = self.edge.parameters() + self.server.parameters()
        if self.ee_head is not None:
            out += self.ee_head.parameters()
        return out

    def named_parameters(self):
        yield from self.edge.named_parameters("edge.")
        yield from self.server.named_parameters("server.")
        if self.ee_head is not None:
            yield "ee.W", self.ee_head.W
            yield "ee.b", self.ee_head.b


def build_split_model(
    M: int,
    edge_layers: int = 1,
    server_layers: int = 3,
    early_exit: bool = False,
    channel: Optional[ChannelConfig] = None,
    seed=0,
    input_size: int = 1,
) -> SplitModel:
    """Fresh model with ``H = M`` in every layer, initialised from one seeded stream."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    edge = nn.init_params(input_size, M, edge_layers, head=False, seed=rng)
    server = nn.init_params(M, M, server_layers, head=True, seed=rng)
    head = None
    if early_exit:
        bound = 1.0 / np.sqrt(M)
        head = EarlyExitHead(
            Tensor(rng.uniform(-bound, bound, size=(1, M)), requires_grad=True),
            Tensor(rng.uniform(-bound, bound, size=(1,)), requires_grad=True),
        )
    return SplitModel(edge, server, channel or ChannelConfig.none(), head)


def edge_forward(x, edge: nn.LstmStackParams) -> Tensor:
    """``z``: final hidden state of the edge stack. ``(B, M)`` for a batch, ``(M,)`` for one window."""
    arr = x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    single = arr.ndim == 2
    if arr.ndim not in (2, 3) or arr.shape[-1] != edge.D:
        raise DimensionError(f"edge input must be (B, T, {edge.D}) or (T, {edge.D}), got {arr.shape}")
    _, finals = nn.lstm_stack_forward(arr, edge.layers)
    z = finals[-1]
    return ag.reshape(z, (edge.H,)) if single else z


def server_forward(z_hat: Tensor, server: nn.LstmStackParams) -> Tensor:
    """Server prediction from the received representation, read as a one-step sequence."""
    if z_hat.shape[-1] != server.D:
        raise DimensionError(f"server expects width {server.D}, got {z_hat.shape}")
    single = z_hat.values.ndim == 1
    zb = ag.reshape(z_hat, (1, server.D)) if single else z_hat
    _, finals = nn.lstm_stack_forward([zb], server.layers)
    y = nn.fc(finals[-1], server.fc_W, server.fc_b)
    return ag.reshape(y, ()) if single else y


def ee_forward(z: Tensor, ee_head: Optional[EarlyExitHead]) -> Tensor:
    if ee_head is None:
        raise ValueError("model has no early-exit head")
    return nn.fc(z, ee_head.W, ee_head.b)


def split_forward(model: SplitModel, x, channel: ChannelLayer) -> Tuple[Tensor, Optional[Tensor]]:
    """``(y_hat, y_hat_ee)``; the second is None without an early-exit head."""
    z = edge_forward(x, model.edge)
    y_hat = server_forward(channel(z), model.server)
    y_ee = ee_forward(z, model.ee_head) if model.ee_head is not None else None
    return y_hat, y_ee


def _as_tensor(y) -> Tensor:
    return y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=np.float64))


def loss_mse(y, y_hat) -> Tensor:
    """Mean of squared residuals over the batch."""
    y, y_hat = _as_tensor(y), _as_tensor(y_hat)
    if y.size == 0:
        raise ValueError("loss_mse: empty batch")
    if y.shape != y_hat.shape:
        raise DimensionError(f"loss_mse: targets {y.shape} vs predictions {y_hat.shape}")
    return ag.mean(ag.square(ag.sub(y_hat, y)))


def loss_ee(y, y_hat, y_hat_ee, lam: float) -> Tensor:
    """``lam * MSE(server) + (1 - lam) * MSE(early exit)``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    server = loss_mse(y, y_hat)
    local = loss_mse(y, y_hat_ee)
    return ag.add(ag.scale(server, lam), ag.scale(local, 1.0 - lam))


def select_mode(server_val_mse: float, ee_val_mse: float, threshold: Optional[float] = None) -> str:
    """Server-side choice between forwarding ``z`` and exiting at the edge.

    Without a threshold the early exit wins only if it is strictly better;
    with a threshold the device exits once the server MSE exceeds it.
    """
    if threshold is None or threshold == 0:
        worse = server_val_mse > ee_val_mse
    else:
        worse = server_val_mse > threshold
    return EXIT_LOCALLY if worse else FORWARD_TO_SERVER


@dataclass
class HetSplitModel:
    """Several edge stacks of different depth feeding one shared server."""

    edges: List[nn.LstmStackParams]
    server: nn.LstmStackParams
    channel: ChannelConfig = field(default_factory=ChannelConfig.none)

    def __post_init__(self):
        if not self.edges:
            raise ValueError("need at least one edge device")
        for i, e in enumerate(self.edges):
            if e.has_head:
                raise ValueError(f"edge {i} must not carry an fc head")
            if e.H != self.server.D:
                raise DimensionError(f"edge {i} output width {e.H} != server input width {self.server.D}")
        self.channel.check_width(self.M)

    @property
    def M(self) -> int:
        return self.server.D

    @property
    def C(self) -> int:
        return len(self.edges)

    @property
    def kind(self) -> str:
        return "heterogeneous"

    def parameters(self) -> List[Tensor]:
        return [p for e in self.edges for p in e.parameters()] + self.server.parameters()

    def named_parameters(self):
        for i, e in enumerate(self.edges):
            yield from e.named_parameters(f"edge{i}.")
        yield from self.server.named_parameters("server.")


def build_het_model(
    M: int,
    edge_layers: Sequence[int] = (1, 2),
    server_layers: int = 3,
    channel: Optional[ChannelConfig] = None,
    seed=0,
    input_size: int = 1,
) -> HetSplitModel:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    edges = [nn.init_params(input_size, M, n, head=False, seed=rng) for n in edge_layers]
    server = nn.init_params(M, M, server_layers, head=True, seed=rng)
    return HetSplitModel(edges, server, channel or ChannelConfig.none())


def het_forward(x_batches: Sequence, het: HetSplitModel, channel: ChannelLayer) -> List[Tensor]:
    """Per-device predictions from one shared server pass.

    Each device's representation crosses the channel independently; the
    received representations are stacked along the batch axis so the server
    runs once, then the outputs are split back per device.
    """
    if len(x_batches) != het.C:
        raise ValueError(f"expected {het.C} device batches, got {len(x_batches)}")
    received, sizes = [], []
    for i, (x, edge) in enumerate(zip(x_batches, het.edges)):
        arr = np.asarray(x.values if isinstance(x, Tensor) else x, dtype=np.float64)
        if arr.shape[0] == 0:
            raise ValueError(f"device {i} batch is empty")
        z = edge_forward(arr, edge)
        if z.shape[-1] != het.M:
            raise DimensionError(f"device {i} representation width {z.shape[-1]} != {het.M}")
        received.append(channel(z))
        sizes.append(arr.shape[0])
    Z = received[0] if het.C == 1 else ag.concat(received, axis=0)
    Y = server_forward(Z, het.server)
    if het.C == 1:
        return [Y]
    bounds = np.cumsum([0] + sizes)
    return [ag.slice_rows(Y, int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:])]


def loss_het(y_lists: Sequence, y_hat_lists: Sequence) -> Tensor:
    """Unweighted sum of per-device MSE."""
    if len(y_lists) != len(y_hat_lists) or not y_lists:
        raise ValueError(f"need matching nonempty lists, got {len(y_lists)} targets and {len(y_hat_lists)} predictions")
    total = loss_mse(y_lists[0], y_hat_lists[0])
    for y, y_hat in zip(y_lists[1:], y_hat_lists[1:]):
        total = ag.add(total, loss_mse(y, y_hat))
    return total


def save_model(model: Union[SplitModel, HetSplitModel], path, meta: Optional[dict] = None) -> None:
    """Checkpoint all parameters with the model-kind tag (baseline | early_exit | heterogeneous)."""
    nn.save_checkpoint(path, list(model.named_parameters()), kind=model.kind, meta=meta)


def _stack_from(arrays: dict, prefix: str) -> nn.LstmStackParams:
    layers, i = [], 0
    while f"{prefix}layer{i}.W_ih" in arrays:
        t = lambda k: Tensor(arrays[f"{prefix}layer{i}.{k}"], requires_grad=True)  # noqa: E731
        layers.append(nn.LstmLayerParams(t("W_ih"), t("W_hh"), t("b")))
        i += 1
    if f"{prefix}fc.W" in arrays:
        return nn.LstmStackParams(
            layers,
            Tensor(arrays[f"{prefix}fc.W"], requires_grad=True),
            Tensor(arrays[f"{prefix}fc.b"], requires_grad=True),
        )
    return nn.LstmStackParams(layers)


def load_model(path) -> Union[SplitModel, HetSplitModel]:
    """Rebuild a model from :func:`save_model` output. The channel is reset to ``none``."""
    kind, arrays = nn.load_checkpoint(path)
    server = _stack_from(arrays, "server.")
    if kind == "heterogeneous":
        edges, i = [], 0
        while f"edge{i}.layer0.W_ih" in arrays:
            edges.append(_stack_from(arrays, f"edge{i}."))
            i += 1
        return HetSplitModel(edges, server)
    head = None
    if kind == "early_exit":
        head = EarlyExitHead(Tensor(arrays["ee.W"], requires_grad=True), Tensor(arrays["ee.b"], requires_grad=True))
    elif kind != "baseline":
        raise ValueError(f"unknown model kind {kind!r} in {path}")
    return SplitModel(_stack_from(arrays, "edge."), server, ChannelConfig.none(), head)
