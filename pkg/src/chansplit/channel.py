"""Wireless channel layers applied to the transmitted representation.

Two impairments are modelled:

* symbol erasure: every symbol is independently zeroed with probability ``p``
  (``z_hat = z * q`` with ``q`` Bernoulli); survivors are *not* rescaled;
* two-state AWGN: ``m2`` randomly placed symbols get deep-fade noise of
  variance ``sigma2^2``, the remaining ``m1`` get ``sigma1^2``. Variances are
  calibrated from the representation power ``R = mean(z**2)`` and the target
  SNR, per sample.

Both act on a batch ``(B, M)`` (or a single ``(M,)`` vector). Inside a training
graph the erasure mask and the noise are constants, so the erasure layer
backpropagates ``g * q`` and the noise layer is the identity.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import autograd as ag
from .autograd import Tensor

KINDS = ("none", "erasure", "awgn2")

# R (and so sigma^2) is recomputed per sample; "batch" pools power over the batch.
POWER_CALIBRATION = "sample"


class DegeneratePowerWarning(RuntimeWarning):
    """The representation has zero power, so no noise variance can be calibrated."""


@dataclass(frozen=True)
class ChannelConfig:
    kind: str = "none"
    p: float = 0.0
    snr1_db: float = math.inf
    snr2_db: float = math.inf
    m1: int = 0
    m2: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"channel kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "erasure" and not 0.0 <= self.p <= 1.0:
            raise ValueError(f"erasure probability must lie in [0, 1], got {self.p}")
        if self.kind == "awgn2":
            if self.m1 < 0 or self.m2 < 0:
                raise ValueError(f"m1 and m2 must be nonnegative, got m1={self.m1}, m2={self.m2}")
            for name in ("snr1_db", "snr2_db"):
                if math.isnan(getattr(self, name)):
                    raise ValueError(f"{name} must not be NaN")

    @classmethod
    def none(cls) -> "ChannelConfig":
        return cls("none")

    @classmethod
    def erasure(cls, p: float) -> "ChannelConfig":
        return cls("erasure", p=float(p))

    @classmethod
    def awgn2(cls, snr1_db: float, m1: int, m2: int, snr2_db: Optional[float] = None,
              fade_offset_db: float = 5.0) -> "ChannelConfig":
        """Two-state AWGN; the deep-fade SNR defaults to ``snr1_db - fade_offset_db``."""
        if snr2_db is None:
            snr2_db = snr1_db - fade_offset_db
        return cls("awgn2", snr1_db=float(snr1_db), snr2_db=float(snr2_db), m1=int(m1), m2=int(m2))

    @property
    def M(self) -> Optional[int]:
        return self.m1 + self.m2 if self.kind == "awgn2" else None

    def check_width(self, M: int) -> None:
        if self.kind == "awgn2" and self.m1 + self.m2 != M:
            raise ValueError(
                f"awgn2 needs m1 + m2 == M, got m1={self.m1} + m2={self.m2} != M={M}"
            )

    def label(self) -> str:
        if self.kind == "none":
            return "none"
        if self.kind == "erasure":
            return f"p={self.p:g}"
        return f"snr1={self.snr1_db:g}dB;snr2={self.snr2_db:g}dB;m1={self.m1};m2={self.m2}"


def _values(z) -> np.ndarray:
    return z.values if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)


def snr_to_var(z, snr_db: float, calibration: str = POWER_CALIBRATION) -> Union[float, np.ndarray]:
    """Noise variance giving ``snr_db`` for representation ``z``.

    ``sigma^2 = R / 10**(snr_db/10)`` with ``R = mean(z**2)`` over the last axis.
    A 1-D input gives a float; a ``(B, M)`` batch gives ``(B,)`` per-sample
    variances (or a broadcast batch-pooled value with ``calibration="batch"``).
    Zero power yields ``0`` and a :class:`DegeneratePowerWarning`.
    """
    if not math.isfinite(snr_db):
        if snr_db == math.inf:
            v = _values(z)
            return 0.0 if v.ndim == 1 else np.zeros(v.shape[0])
        raise ValueError(f"snr_db must be finite or +inf, got {snr_db}")
    v = _values(z)
    if calibration == "sample":
        R = np.mean(v * v, axis=-1)
    elif calibration == "batch":
        R = np.full(v.shape[:-1], np.mean(v * v))
    else:
        raise ValueError(f"unknown calibration {calibration!r}")
    if np.any(R == 0.0):
        warnings.warn("representation has zero power; noise variance set to 0", DegeneratePowerWarning,
                      stacklevel=2)
    var = R / 10.0 ** (snr_db / 10.0)
    return float(var) if np.ndim(var) == 0 else var


def erasure_mask(shape, p: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"erasure probability must lie in [0, 1], got {p}")
    if p == 0.0:
        return np.ones(shape)
    return (rng.random(shape) >= p).astype(np.float64)


def erasure_apply(z: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Zero each symbol independently with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"erasure probability must lie in [0, 1], got {p}")
    if p == 0.0:
        return z
    return ag.mul(z, Tensor(erasure_mask(z.shape, p, rng)))


def deep_fade_positions(batch: int, M: int, m2: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean ``(batch, M)`` mask with exactly ``m2`` uniformly placed True entries per row."""
    # always consume the stream so draws stay aligned across m2 values
    # argsort of iid uniforms is a uniform random permutation per row
    ranks = np.argsort(rng.random((batch, M)), axis=1)
    mask = np.zeros((batch, M), dtype=bool)
    np.put_along_axis(mask, ranks[:, :m2], True, axis=1)
    return mask


def awgn2_noise(zv: np.ndarray, cfg: ChannelConfig, rng: np.random.Generator,
                calibration: str = POWER_CALIBRATION):
    """Draw two-state noise for a ``(B, M)`` array; returns ``(noise, deep_fade_mask)``."""
    B, M = zv.shape
    cfg.check_width(M)
    fade = deep_fade_positions(B, M, cfg.m2, rng)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegeneratePowerWarning)
        var1 = np.broadcast_to(snr_to_var(zv, cfg.snr1_db, calibration), (B,))
        var2 = np.broadcast_to(snr_to_var(zv, cfg.snr2_db, calibration), (B,))
    std = np.where(fade, np.sqrt(var2)[:, None], np.sqrt(var1)[:, None])
    return std * rng.standard_normal((B, M)), fade


def awgn2_apply(z: Tensor, cfg: ChannelConfig, rng: np.random.Generator,
                calibration: str = POWER_CALIBRATION) -> Tensor:
    """Add two-state Gaussian noise; the noise is a constant w.r.t. ``z``."""
    if cfg.kind != "awgn2":
        raise ValueError(f"awgn2_apply needs an awgn2 config, got kind={cfg.kind!r}")
    squeeze = z.values.ndim == 1
    zv = z.values[None] if squeeze else z.values
    noise, _ = awgn2_noise(zv, cfg, rng, calibration)
    return ag.add(z, Tensor(noise[0] if squeeze else noise))


class ChannelLayer:
    """Non-trainable layer between edge and server; draws fresh randomness on every call."""

    def __init__(self, cfg: ChannelConfig, rng: np.random.Generator,
                 calibration: str = POWER_CALIBRATION):
        self.cfg = cfg
        self.rng = rng
        self.calibration = calibration

    def draw(self, zv: np.ndarray) -> Optional[np.ndarray]:
        """One channel realisation for ``zv``: an erasure mask, additive noise, or None."""
        cfg = self.cfg
        if cfg.kind == "none" or (cfg.kind == "erasure" and cfg.p == 0.0):
            return None
        if cfg.kind == "erasure":
            return erasure_mask(zv.shape, cfg.p, self.rng)
        squeeze = zv.ndim == 1
        noise, _ = awgn2_noise(zv[None] if squeeze else zv, cfg, self.rng, self.calibration)
        return noise[0] if squeeze else noise

    def apply(self, z: Tensor, realisation: Optional[np.ndarray]) -> Tensor:
        if realisation is None:
            return z
        if self.cfg.kind == "erasure":
            return ag.mul(z, Tensor(realisation))
        return ag.add(z, Tensor(realisation))

    def __call__(self, z: Tensor) -> Tensor:
        return self.apply(z, self.draw(z.values))

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.cfg.label()})"


class FrozenChannelLayer(ChannelLayer):
    """Reuses the realisation drawn on the first call (finite-difference checks, paired passes)."""

    def __init__(self, cfg: ChannelConfig, rng: np.random.Generator,
                 calibration: str = POWER_CALIBRATION):
        super().__init__(cfg, rng, calibration)
        self.realisations: list = []
        self.calls = 0

    def __call__(self, z: Tensor) -> Tensor:
        if self.calls < len(self.realisations):
            r = self.realisations[self.calls]
        else:
            r = self.draw(z.values)
            self.realisations.append(r)
        self.calls += 1
        return self.apply(z, r)

    def rewind(self) -> None:
        self.calls = 0


def channel_as_layer(cfg: ChannelConfig, rng: np.random.Generator) -> ChannelLayer:
    return ChannelLayer(cfg, rng)
