"""Per-tick anomaly scoring, heatmap data export, and threshold-sweep
evaluation (AUC and ideal F1)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import TimeSeries
from .numerics import minmax_scale
from .recnet import decoder_forward, encoder_forward
from .trainer import Checkpoint


@dataclass(frozen=True)
class AnomalyReport:
    """Per-tick anomalousness: raw Euclidean reconstruction errors, their
    min-max scaled version, and the per-channel absolute error matrix."""

    raw: np.ndarray       # (T,), >= 0
    scaled: np.ndarray    # (T,) in [0, 1]
    channel_errors: np.ndarray  # (T, M), >= 0
    windows: tuple[tuple[int, int], ...]

    def write_scores_csv(self, path, labels: np.ndarray | None = None) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("tick,raw_score,scaled_score" + (",label" if labels is not None else "") + "\n")
            for t in range(len(self.raw)):
                row = f"{t},{float(self.raw[t])!r},{float(self.scaled[t])!r}"
                if labels is not None:
                    row += f",{int(labels[t])}"
                fh.write(row + "\n")

    def write_heatmap_csv(self, path, channel_names) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("tick," + ",".join(channel_names) + "\n")
            for t in range(self.channel_errors.shape[0]):
                fh.write(str(t) + "," + ",".join(repr(float(v)) for v in self.channel_errors[t]) + "\n")


@dataclass(frozen=True)
class EvalResult:
    auc: float
    ideal_f1: float
    threshold: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int
    tn: int

    def write_summary(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for key in ("auc", "ideal_f1", "threshold", "precision", "recall"):
                fh.write(f"{key}={getattr(self, key)!r}\n")
            for key in ("tp", "fp", "fn", "tn"):
                fh.write(f"{key}={getattr(self, key)}\n")


def _score_windows(t: int, window: int, breaks=()) -> list[tuple[int, int]]:
    """Non-overlapping windows of fixed length tiling [0, t), restarting at
    every break point; remainders are scored at their natural length."""
    edges = sorted({0, t, *(b for b in breaks if 0 < b < t)})
    bounds = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        start = lo
        while start + window <= hi:
            bounds.append((start, start + window))
            start += window
        if start < hi:
            bounds.append((start, hi))
    return bounds


def _categorical_breaks(y: np.ndarray, schema) -> np.ndarray:
    """Ticks where a categorical conditional channel switches value. A
    reconstruction window must not straddle such a switch: the decoder
    replays from a single summary state and a regime change inside the
    window would poison the scores of the surrounding normal ticks."""
    cat_idx = [i for i, name in enumerate(schema.cond_channels)
               if name in schema.categorical_cond]
    if not cat_idx or y.shape[0] < 2:
        return np.empty(0, dtype=np.int64)
    cat = y[:, cat_idx]
    return np.where(np.any(np.diff(cat, axis=0) != 0, axis=1))[0] + 1


def anomaly_scores(checkpoint: Checkpoint, series: TimeSeries,
                   batch_windows: int = 64) -> AnomalyReport:
    """Score a normalized series per tick with the checkpoint's model.

    The series must already be normalized with the checkpoint's stats and
    carry the checkpoint's conditional channels. Scoring windows are
    non-overlapping, fixed at the checkpoint's score_window, and restart
    wherever a categorical conditional switches; same-length windows are
    reconstructed in batches."""
    if series.m != len(checkpoint.schema.data_channels) or \
            series.c != len(checkpoint.schema.cond_channels):
        raise ValueError(
            f"series channels ({series.m} data, {series.c} cond) do not match "
            f"checkpoint schema ({len(checkpoint.schema.data_channels)} data, "
            f"{len(checkpoint.schema.cond_channels)} cond)"
        )
    model = checkpoint.model
    breaks = _categorical_breaks(series.y, checkpoint.schema)
    windows = _score_windows(series.t, checkpoint.score_window, breaks)
    xr = np.empty_like(series.x)
    by_length: dict[int, list[tuple[int, int]]] = {}
    for lo, hi in windows:
        by_length.setdefault(hi - lo, []).append((lo, hi))
    for length in sorted(by_length):
        group = by_length[length]
        for i in range(0, len(group), batch_windows):
            chunk = group[i:i + batch_windows]
            x = np.stack([series.x[lo:hi] for lo, hi in chunk])
            y = np.stack([series.y[lo:hi] for lo, hi in chunk])
            hs, _ = encoder_forward(model, x, y)
            rec, _ = decoder_forward(model, hs[:, -1, :], y)
            for j, (lo, hi) in enumerate(chunk):
                xr[lo:hi] = rec[j]

    err = series.x - xr
    raw = np.sqrt(np.sum(err * err, axis=1))
    return AnomalyReport(raw=raw, scaled=minmax_scale(raw),
                         channel_errors=np.abs(err), windows=tuple(windows))


def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted 0.5."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs at least one positive and one negative label")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores))
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    rank_sum_pos = float(np.sum(ranks[labels == 1]))
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def ideal_f1(scores: np.ndarray, labels: np.ndarray) -> EvalResult:
    """Best F1 over all thresholds (prediction: score >= threshold).

    Returns the maximum F1 together with the smallest threshold attaining
    it and the confusion counts at that threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("ideal_f1 needs at least one positive label")
    n = len(scores)

    order = np.argsort(-scores, kind="mergesort")
    s_sorted = scores[order]
    l_sorted = labels[order]
    cum_tp = np.cumsum(l_sorted)
    # last index of each distinct score when sorted descending ->
    # predictions at threshold s_sorted[i] cover exactly positions 0..i
    is_last = np.ones(n, dtype=bool)
    is_last[:-1] = s_sorted[:-1] != s_sorted[1:]
    idx = np.where(is_last)[0]
    tp = cum_tp[idx].astype(np.float64)
    predicted = idx + 1.0
    f1 = 2.0 * tp / (predicted + n_pos)  # == 2TP / (2TP + FP + FN)
    best = int(np.argmax(f1))
    # smallest threshold attaining the max F1 == largest prediction set,
    # i.e. the latest index among ties
    ties = np.where(f1 == f1[best])[0]
    best = int(ties[-1])

    thr = float(s_sorted[idx[best]])
    tp_b = int(tp[best])
    fp_b = int(predicted[best]) - tp_b
    fn_b = n_pos - tp_b
    tn_b = n - tp_b - fp_b - fn_b
    precision = tp_b / (tp_b + fp_b) if tp_b + fp_b else 0.0
    recall = tp_b / n_pos
    return EvalResult(auc=float("nan"), ideal_f1=float(f1[best]), threshold=thr,
                      precision=precision, recall=recall,
                      tp=tp_b, fp=fp_b, fn=fn_b, tn=tn_b)


def evaluate(scores: np.ndarray, labels: np.ndarray) -> EvalResult:
    """AUC plus ideal F1 in one result."""
    res = ideal_f1(scores, labels)
    return EvalResult(auc=auc(scores, labels), ideal_f1=res.ideal_f1,
                      threshold=res.threshold, precision=res.precision,
                      recall=res.recall, tp=res.tp, fp=res.fp, fn=res.fn, tn=res.tn)
