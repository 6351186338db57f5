"""Time-series ingestion, windowing, scaling and chronological splits."""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

WINDOW = 30


class DataError(ValueError):
    """Bad input data: missing column, unparseable cell, too-short series."""


def load_csv(path, value_column: str, delimiter: str = ",") -> np.ndarray:
    """Read one numeric column from a CSV with a header row, in file order."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if value_column not in header:
            raise DataError(f"{path}: column {value_column!r} not found; available columns: {header}")
        col = header.index(value_column)
        values, bad = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            cell = row[col].strip() if col < len(row) else ""
            try:
                v = float(cell)
                if not math.isfinite(v):
                    raise ValueError
            except ValueError:
                bad.append((lineno, cell))
                continue
            values.append(v)
    if bad:
        shown = ", ".join(f"row {n}: {c!r}" for n, c in bad[:10])
        more = f" (+{len(bad) - 10} more)" if len(bad) > 10 else ""
        raise DataError(f"{path}: non-numeric values in column {value_column!r}: {shown}{more}")
    return np.asarray(values, dtype=np.float64)


def window(series: Sequence[float], N: int = WINDOW) -> Tuple[np.ndarray, np.ndarray]:
    """Instances ``(features[k], label[k]) = (series[k:k+N], series[k+N])``."""
    s = np.asarray(series, dtype=np.float64)
    if N < 1:
        raise ValueError(f"window size must be positive, got {N}")
    if s.ndim != 1 or s.size <= N:
        raise DataError(f"series of length {s.size} is too short for a window of {N}")
    idx = np.arange(s.size - N)[:, None] + np.arange(N)[None, :]
    return s[idx], s[N:].copy()


@dataclass(frozen=True)
class Scaler:
    """Affine map of ``[lo, hi]`` onto ``[-1, 1]``."""

    lo: float
    hi: float

    @classmethod
    def fit(cls, values) -> "Scaler":
        v = np.asarray(values, dtype=np.float64)
        if v.size == 0:
            raise DataError("cannot fit a scaler on no values")
        lo, hi = float(v.min()), float(v.max())
        if not hi > lo:
            raise DataError(f"cannot normalise a constant range (min = max = {lo})")
        return cls(lo, hi)

    def transform(self, x):
        return 2.0 * (np.asarray(x, dtype=np.float64) - self.lo) / (self.hi - self.lo) - 1.0

    def inverse(self, x):
        return (np.asarray(x, dtype=np.float64) + 1.0) * (self.hi - self.lo) / 2.0 + self.lo

    def mse_to_raw(self, mse: float) -> float:
        """Convert an MSE measured in the scaled domain back to raw units."""
        return mse * ((self.hi - self.lo) / 2.0) ** 2


def normalize(series, fit_range: Optional[Tuple[int, int]] = None) -> Tuple[np.ndarray, Scaler]:
    """Scale to ``[-1, 1]`` with min/max taken from ``series[fit_range[0]:fit_range[1]]``."""
    s = np.asarray(series, dtype=np.float64)
    lo, hi = fit_range if fit_range is not None else (0, s.size)
    scaler = Scaler.fit(s[lo:hi])
    return scaler.transform(s), scaler


def split_counts(n: int, fractions: Sequence[float]) -> Tuple[int, ...]:
    """Largest-remainder allocation: floor every share, hand leftovers to the largest remainders.

    Ties go to the earlier split.
    """
    fr = [float(f) for f in fractions]
    if any(f < 0 for f in fr):
        raise ValueError(f"split fractions must be nonnegative, got {fr}")
    if not math.isclose(sum(fr), 1.0, abs_tol=1e-9):
        raise ValueError(f"split fractions must sum to 1, got {sum(fr)}")
    # round away float noise such as 0.3 * 10 = 3.0000000000000004 before flooring
    shares = [round(f * n, 9) for f in fr]
    counts = [int(math.floor(s)) for s in shares]
    rema = [round(s - c, 9) for s, c in zip(shares, counts)]
    left = n - sum(counts)
    for i in sorted(range(len(fr)), key=lambda i: (-rema[i], i))[:left]:
        counts[i] += 1
    return tuple(counts)


@dataclass
class SeriesDataset:
    """Windowed, scaled series with chronological train/val/test ranges over the instances."""

    name: str
    raw: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    bounds: Tuple[int, int, int, int]
    scaler: Scaler
    N: int = WINDOW
    source: dict = field(default_factory=dict)

    def _part(self, i: int):
        lo, hi = self.bounds[i], self.bounds[i + 1]
        return self.features[lo:hi, :, None], self.labels[lo:hi]

    @property
    def train(self):
        return self._part(0)

    @property
    def val(self):
        return self._part(1)

    @property
    def test(self):
        return self._part(2)

    @property
    def counts(self) -> Tuple[int, int, int]:
        b = self.bounds
        return b[1] - b[0], b[2] - b[1], b[3] - b[2]

    def manifest(self) -> dict:
        return {
            "name": self.name,
            "source": self.source,
            "length": int(self.raw.size),
            "window": self.N,
            "instances": int(self.labels.size),
            "split_counts": list(self.counts),
            "scaler": {"min": self.scaler.lo, "max": self.scaler.hi},
        }

    def write_manifest(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.manifest(), fh, indent=2, sort_keys=True)


def split(
    raw: Sequence[float],
    fractions: Sequence[float] = (0.6, 0.1, 0.3),
    N: int = WINDOW,
    name: str = "series",
    val_from_train: float = 0.0,
    source: Optional[dict] = None,
) -> SeriesDataset:
    """Window, split chronologically, then scale with bounds fitted on the training span.

    ``fractions`` is (train, val, test) or (train, test). With a two-way split
    and ``val_from_train > 0`` the last part of the training range becomes the
    validation range. The scaler sees only raw values that feed training
    instances (features and labels), so later splits may exceed ``[-1, 1]``.
    """
    raw = np.asarray(raw, dtype=np.float64)
    feats, labels = window(raw, N)
    n = labels.size
    fr = list(fractions)
    if len(fr) == 2:
        n_train, n_test = split_counts(n, fr)
        n_val = int(math.floor(round(n_train * val_from_train, 9)))
        n_train -= n_val
    elif len(fr) == 3:
        n_train, n_val, n_test = split_counts(n, fr)
    else:
        raise ValueError(f"fractions must have 2 or 3 entries, got {fr}")
    bounds = (0, n_train, n_train + n_val, n)
    if n_train == 0:
        raise DataError("training split is empty")
    # raw[0 : n_train + N) covers every value seen by a training instance
    scaler = Scaler.fit(raw[: n_train + N])
    scaled = scaler.transform(raw)
    sf, sl = window(scaled, N)
    return SeriesDataset(name, raw, sf, sl, bounds, scaler, N, dict(source or {}))


def synth_series(kind: str, length: int, seed: int = 0, phi: float = 0.95,
                 noise_std: Optional[float] = None, x0: float = 0.0, period: float = 50.0) -> np.ndarray:
    """Synthetic stand-in series.

    ``ar1``: ``x_0 = x0``, ``x_t = phi * x_{t-1} + e_t``, ``e_t ~ N(0, noise_std^2)`` (default 0.05).
    ``sine_noise``: ``sin(2 pi t / period) + noise_std * N(0, 1)`` (default 0.1).
    """
    if length <= WINDOW + 1:
        raise ValueError(f"length must exceed {WINDOW + 1}, got {length}")
    rng = np.random.default_rng(seed)
    if kind == "ar1":
        sd = 0.05 if noise_std is None else noise_std
        eps = rng.standard_normal(length) * sd
        x = np.empty(length)
        x[0] = x0
        for t in range(1, length):
            x[t] = phi * x[t - 1] + eps[t]
        return x
    if kind == "sine_noise":
        sd = 0.1 if noise_std is None else noise_std
        t = np.arange(length)
        return np.sin(2 * np.pi * t / period) + sd * rng.standard_normal(length)
    raise ValueError(f"unknown synthetic series kind {kind!r}; expected 'ar1' or 'sine_noise'")


def write_series_csv(path, values: Sequence[float], column: str = "value") -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", column])
        for i, v in enumerate(values):
            w.writerow([i, repr(float(v))])
    os.replace(tmp, path)


def device_partition(n: int, C: int, block: int = 64) -> List[np.ndarray]:
    """Indices ``0..n-1`` dealt to ``C`` devices in alternating contiguous blocks."""
    if C < 1:
        raise ValueError("need at least one device")
    blocks = np.arange(n) // block
    return [np.flatnonzero(blocks % C == i) for i in range(C)]
