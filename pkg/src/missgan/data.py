"""Ingest, normalize, coarsely segment, and synthesize labeled multivariate
time series with separate data and conditional channels."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .numerics import child_rng


class SchemaError(ValueError):
    pass


class ParseError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelSchema:
    """Names of data channels (the M input dims), conditional channels (y),
    and the optional 0/1 anomaly-label column."""

    data_channels: tuple[str, ...]
    cond_channels: tuple[str, ...] = ()
    label_channel: str | None = None
    # conditional channels listed here bypass normalization (e.g. one-hot flags)
    categorical_cond: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "data_channels", tuple(self.data_channels))
        object.__setattr__(self, "cond_channels", tuple(self.cond_channels))
        object.__setattr__(self, "categorical_cond", tuple(self.categorical_cond))
        if len(self.data_channels) < 1:
            raise SchemaError("data_channels must be nonempty")
        names = list(self.data_channels) + list(self.cond_channels)
        if self.label_channel is not None:
            names.append(self.label_channel)
        if len(set(names)) != len(names):
            raise SchemaError("channel names must be mutually disjoint")
        unknown = set(self.categorical_cond) - set(self.cond_channels)
        if unknown:
            raise SchemaError(f"categorical_cond names not in cond_channels: {sorted(unknown)}")

    @property
    def m(self) -> int:
        return len(self.data_channels)

    @property
    def c(self) -> int:
        return len(self.cond_channels)


@dataclass(frozen=True)
class TimeSeries:
    """A T-tick multivariate series: data x (T,M), conditionals y (T,C),
    optional 0/1 labels (T,)."""

    x: np.ndarray
    y: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError("x must be 2-D (T, M)")
        y = np.asarray(self.y, dtype=np.float64)
        if y.size == 0:
            y = np.zeros((x.shape[0], 0))
        if y.ndim != 2 or y.shape[0] != x.shape[0]:
            raise ValueError("y must be 2-D with the same number of rows as x")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64)
            if lab.shape != (x.shape[0],):
                raise ValueError("labels must be a length-T vector")
            if not np.all((lab == 0) | (lab == 1)):
                raise ValueError("labels must be 0/1")
            object.__setattr__(self, "labels", lab)
        if not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
            raise ValueError("series contains missing or non-finite values")

    @property
    def t(self) -> int:
        return self.x.shape[0]

    @property
    def m(self) -> int:
        return self.x.shape[1]

    @property
    def c(self) -> int:
        return self.y.shape[1]


@dataclass(frozen=True)
class NormStats:
    """Per-channel normalization statistics over data channels then
    conditional channels (M + C entries), fit on the training split.

    For min-max mode `a` holds the per-channel min and `b` the max; for
    z-score mode `a` holds the mean and `b` the population std.
    `constant` flags channels with no spread; `passthrough` flags channels
    (categorical conditionals) left untouched.
    """

    mode: str  # "minmax" | "zscore"
    a: np.ndarray
    b: np.ndarray
    constant: np.ndarray
    passthrough: np.ndarray

    @property
    def n_channels(self) -> int:
        return self.a.shape[0]


def load_csv(path, schema: ChannelSchema) -> TimeSeries:
    """Read a header CSV into a TimeSeries with columns ordered as in schema."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        col = {name: i for i, name in enumerate(header)}
        wanted = list(schema.data_channels) + list(schema.cond_channels)
        if schema.label_channel is not None:
            wanted.append(schema.label_channel)
        for name in wanted:
            if name not in col:
                raise SchemaError(f"missing column: {name}")
        rows = []
        for rnum, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and row[0].strip() == ""):
                continue
            vals = []
            for name in wanted:
                cell = row[col[name]].strip()
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ParseError(
                        f"{path}: non-numeric value {cell!r} at row {rnum}, column {name!r}"
                    ) from None
            rows.append(vals)
    if not rows:
        raise ParseError(f"{path}: no data rows")
    arr = np.asarray(rows, dtype=np.float64)
    m, c = schema.m, schema.c
    x = arr[:, :m]
    y = arr[:, m:m + c]
    labels = None
    if schema.label_channel is not None:
        raw = arr[:, m + c]
        if not np.all((raw == 0.0) | (raw == 1.0)):
            raise ParseError(f"{path}: label column {schema.label_channel!r} must hold only 0/1")
        labels = raw.astype(np.int64)
    return TimeSeries(x=x, y=y, labels=labels)


def save_csv(path, series: TimeSeries, schema: ChannelSchema) -> None:
    """Write a TimeSeries back to CSV with the schema's column names."""
    header = list(schema.data_channels) + list(schema.cond_channels)
    if schema.label_channel is not None and series.labels is not None:
        header.append(schema.label_channel)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(series.t):
            row = [repr(float(v)) for v in series.x[i]] + [repr(float(v)) for v in series.y[i]]
            if schema.label_channel is not None and series.labels is not None:
                row.append(str(int(series.labels[i])))
            writer.writerow(row)


def _channel_matrix(series: TimeSeries) -> np.ndarray:
    return np.hstack([series.x, series.y]) if series.c else series.x


def normalize_fit(train: TimeSeries, mode: str = "minmax",
                  schema: ChannelSchema | None = None) -> NormStats:
    """Fit per-channel statistics on the training split (data then cond)."""
    if mode not in ("minmax", "zscore"):
        raise ValueError(f"unknown normalization mode {mode!r}")
    mat = _channel_matrix(train)
    passthrough = np.zeros(mat.shape[1], dtype=bool)
    if schema is not None:
        for i, name in enumerate(schema.cond_channels):
            if name in schema.categorical_cond:
                passthrough[train.m + i] = True
    if mode == "minmax":
        a = mat.min(axis=0)
        b = mat.max(axis=0)
        constant = a == b
    else:
        a = mat.mean(axis=0)
        b = mat.std(axis=0)  # population std
        constant = b == 0.0
    return NormStats(mode=mode, a=a, b=b, constant=constant, passthrough=passthrough)


def _apply_channels(mat: np.ndarray, stats: NormStats, offset: int) -> np.ndarray:
    out = mat.copy()
    for j in range(mat.shape[1]):
        k = offset + j
        if stats.passthrough[k]:
            continue
        if stats.constant[k]:
            out[:, j] = 0.0
        elif stats.mode == "minmax":
            out[:, j] = (mat[:, j] - stats.a[k]) / (stats.b[k] - stats.a[k])
        else:
            out[:, j] = (mat[:, j] - stats.a[k]) / stats.b[k]
    return out


def normalize_apply(series: TimeSeries, stats: NormStats) -> TimeSeries:
    """Apply training-split statistics; test values may leave [0,1]."""
    if series.m + series.c != stats.n_channels:
        raise ValueError(
            f"channel count mismatch: series has {series.m + series.c}, stats {stats.n_channels}"
        )
    x = _apply_channels(series.x, stats, 0)
    y = _apply_channels(series.y, stats, series.m)
    return TimeSeries(x=x, y=y, labels=series.labels)


def normalize_invert(series: TimeSeries, stats: NormStats) -> TimeSeries:
    """Invert the affine normalization (constant channels stay at their min/mean)."""
    if series.m + series.c != stats.n_channels:
        raise ValueError("channel count mismatch")

    def invert(mat, offset):
        out = mat.copy()
        for j in range(mat.shape[1]):
            k = offset + j
            if stats.passthrough[k]:
                continue
            if stats.constant[k]:
                out[:, j] = stats.a[k]
            elif stats.mode == "minmax":
                out[:, j] = mat[:, j] * (stats.b[k] - stats.a[k]) + stats.a[k]
            else:
                out[:, j] = mat[:, j] * stats.b[k] + stats.a[k]
        return out

    return TimeSeries(x=invert(series.x, 0), y=invert(series.y, series.m),
                      labels=series.labels)


def coarse_segment(t_or_series, l_init: int) -> list[tuple[int, int]]:
    """Tile [0,T) with consecutive windows of l_init ticks.

    A final remainder shorter than l_init/2 is merged into the previous
    window; otherwise it is kept at its natural length.
    """
    if isinstance(t_or_series, TimeSeries):
        t = t_or_series.t
    else:
        t = int(t_or_series)
    if l_init < 2:
        raise ValueError("l_init must be >= 2")
    if t < 2:
        raise ValueError("series too short to segment (T < 2)")
    bounds = []
    start = 0
    while start + l_init <= t:
        bounds.append((start, start + l_init))
        start += l_init
    rem = t - start
    if rem > 0:
        if rem >= l_init / 2 or not bounds:
            bounds.append((start, t))
        else:
            lo, _ = bounds.pop()
            bounds.append((lo, t))
    return bounds


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a conditioned multi-mode synthetic series with injected
    spike anomalies and mislabeled-condition stretches."""

    modes: int = 2
    waveforms: tuple[str, ...] = ("sine", "sine")
    periods: tuple[int, ...] = (32, 48)
    amplitudes: tuple[float, ...] = (1.0, 0.4)
    noise_std: float = 0.02
    spike_rate: float = 0.0
    spike_magnitude: float = 4.0
    mislabel_rate: float = 0.0
    ticks: int = 10000
    seed: int = 0
    # nominal ticks per mode block (actual lengths jitter +-25%) and ticks
    # per mislabeled stretch
    mode_block: int = 128
    mislabel_block: int = 64

    def __post_init__(self):
        if self.modes < 1:
            raise ValueError("need at least one mode")
        for name, seq in (("waveforms", self.waveforms), ("periods", self.periods),
                          ("amplitudes", self.amplitudes)):
            if len(seq) != self.modes:
                raise ValueError(f"{name} must list one entry per mode")
        for w in self.waveforms:
            if w not in ("sine", "square", "sawtooth"):
                raise ValueError(f"unknown waveform {w!r}")
        for p in self.periods:
            if p < 2:
                raise ValueError("periods must be >= 2 ticks")
        for rate in (self.spike_rate, self.mislabel_rate):
            if not 0.0 <= rate <= 1.0:
                raise ValueError("rates must lie in [0,1]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.ticks < 1:
            raise ValueError("ticks must be >= 1")

    @classmethod
    def from_file(cls, path) -> "SyntheticSpec":
        kv = read_kv_file(path)
        modes = int(kv.pop("modes", 2))
        waveforms, periods, amplitudes = [], [], []
        for i in range(modes):
            waveforms.append(kv.pop(f"waveform.{i}", ("sine", "square", "sawtooth")[i % 3]))
            periods.append(int(kv.pop(f"period.{i}", 64)))
            amplitudes.append(float(kv.pop(f"amplitude.{i}", 1.0)))
        spec = cls(
            modes=modes,
            waveforms=tuple(waveforms),
            periods=tuple(periods),
            amplitudes=tuple(amplitudes),
            noise_std=float(kv.pop("noise_std", 0.05)),
            spike_rate=float(kv.pop("spike_rate", 0.0)),
            spike_magnitude=float(kv.pop("spike_magnitude", 4.0)),
            mislabel_rate=float(kv.pop("mislabel_rate", 0.0)),
            ticks=int(kv.pop("ticks", 10000)),
            seed=int(kv.pop("seed", 0)),
        )
        if kv:
            raise ValueError(f"unknown synthetic-spec keys: {sorted(kv)}")
        return spec


def read_kv_file(path) -> dict[str, str]:
    """Parse a flat key=value file; `#` starts a comment, blank lines ignored."""
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out


def _waveform(kind: str, phase: np.ndarray) -> np.ndarray:
    # phase in cycles
    frac = phase - np.floor(phase)
    if kind == "sine":
        return np.sin(2.0 * np.pi * frac)
    if kind == "square":
        return np.where(frac < 0.5, 1.0, -1.0)
    if kind == "sawtooth":
        return 2.0 * frac - 1.0
    raise ValueError(f"unknown waveform {kind!r}")


def synth_schema(spec: SyntheticSpec) -> ChannelSchema:
    """Column names used by synth_generate when written to CSV."""
    conds = tuple(f"mode{i}" for i in range(spec.modes))
    return ChannelSchema(
        data_channels=("x0", "x1"),
        cond_channels=conds,
        label_channel="label",
        categorical_cond=conds,
    )


def synth_generate(spec: SyntheticSpec) -> TimeSeries:
    """Deterministic conditioned multi-mode generator.

    Two data channels carry the mode's waveform and its quadrature copy;
    conditional channels are one-hot mode indicators. The
    mode cycles in blocks of jittered length. Spikes flip single ticks far
    off the waveform; mislabeled stretches keep the true signal but
    advertise a wrong mode in y. Both kinds are labeled 1.
    """
    rng = child_rng(spec.seed, "synth")
    t = spec.ticks
    ticks = np.arange(t)

    # modes cycle in blocks of jittered length so block boundaries do not
    # fall on a fixed grid
    lo_len = max(1, (3 * spec.mode_block) // 4)
    hi_len = max(lo_len, (5 * spec.mode_block) // 4)
    block_lens = []
    total = 0
    while total < t:
        length = int(rng.integers(lo_len, hi_len + 1))
        block_lens.append(length)
        total += length
    true_mode = np.concatenate(
        [np.full(n, i % spec.modes, dtype=np.int64) for i, n in enumerate(block_lens)]
    )[:t]

    labels = np.zeros(t, dtype=np.int64)
    shown_mode = true_mode.copy()
    if spec.mislabel_rate > 0 and spec.modes > 1:
        n_blocks = max(1, int(round(spec.mislabel_rate * t / spec.mislabel_block)))
        for _ in range(n_blocks):
            start = int(rng.integers(0, max(1, t - spec.mislabel_block)))
            end = min(t, start + spec.mislabel_block)
            wrong = (true_mode[start:end] + 1 + rng.integers(0, spec.modes - 1)) % spec.modes
            shown_mode[start:end] = wrong
            labels[start:end] = 1

    x = np.zeros((t, 2))
    for i in range(spec.modes):
        mask = true_mode == i
        phase = ticks[mask] / spec.periods[i]
        x[mask, 0] = spec.amplitudes[i] * _waveform(spec.waveforms[i], phase)
        x[mask, 1] = spec.amplitudes[i] * _waveform(spec.waveforms[i], phase + 0.25)
    x += rng.normal(0.0, spec.noise_std, size=x.shape) if spec.noise_std > 0 else 0.0

    if spec.spike_rate > 0:
        spikes = rng.random(t) < spec.spike_rate
        signs = np.where(rng.random(t) < 0.5, -1.0, 1.0)
        chan = rng.integers(0, 2, size=t)
        idx = np.where(spikes)[0]
        x[idx, chan[idx]] += signs[idx] * spec.spike_magnitude
        labels[idx] = 1

    y = np.zeros((t, spec.modes))
    y[ticks, shown_mode] = 1.0
    return TimeSeries(x=x, y=y, labels=labels)
