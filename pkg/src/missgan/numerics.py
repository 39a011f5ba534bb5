"""Deterministic numeric kernels: PCA, Adam, min-max score scaling, seeded RNG."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np


def child_rng(seed: int, label: str) -> np.random.Generator:
    """Derive an independent generator from a root seed and a fixed label.

    Subsystems pull their own stream by label, so adding a subsystem never
    perturbs the streams of the others.
    """
    return np.random.default_rng(
        np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(label.encode())])
    )


@dataclass(frozen=True)
class Projection:
    """PCA projection with orthonormal columns, sorted by explained variance."""

    mean: np.ndarray          # (d_h,)
    components: np.ndarray    # (d_h, d_r), orthonormal columns
    explained_variance: np.ndarray  # (d_r,), non-increasing

    @property
    def d_h(self) -> int:
        return self.components.shape[0]

    @property
    def d_r(self) -> int:
        return self.components.shape[1]


def pca_fit(rows: np.ndarray, d_r: int) -> Projection:
    """Top-d_r principal directions of the mean-centered rows.

    Sign convention: each component column's largest-magnitude entry is
    positive, so repeated fits are reproducible.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2:
        raise ValueError("pca_fit expects a 2-D matrix")
    n, d_h = rows.shape
    if n < 2:
        raise ValueError("pca_fit needs at least 2 rows")
    if not (1 <= d_r <= min(n - 1, d_h)):
        raise ValueError(f"d_r={d_r} out of range [1, {min(n - 1, d_h)}]")

    mean = rows.mean(axis=0)
    centered = rows - mean
    cov = centered.T @ centered / (n - 1)
    evals, evecs = np.linalg.eigh(cov)  # ascending
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = evecs[:, order]
    evals = np.maximum(evals, 0.0)

    tol = max(n, d_h) * np.finfo(np.float64).eps * max(evals[0], 1e-300)
    rank = int(np.sum(evals > tol))
    if rank < d_r:
        raise ValueError(f"input has rank {rank} < d_r={d_r}")

    comps = evecs[:, :d_r].copy()
    for j in range(d_r):
        i = int(np.argmax(np.abs(comps[:, j])))
        if comps[i, j] < 0:
            comps[:, j] = -comps[:, j]
    return Projection(mean=mean, components=comps, explained_variance=evals[:d_r].copy())


def pca_transform(proj: Projection, rows: np.ndarray) -> np.ndarray:
    """Project rows onto the principal directions: (rows - mean) @ components."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != proj.d_h:
        raise ValueError(f"expected rows with {proj.d_h} columns, got shape {rows.shape}")
    return (rows - proj.mean) @ proj.components


def pca_reconstruct(proj: Projection, reduced: np.ndarray) -> np.ndarray:
    """Map reduced rows back to the original space."""
    reduced = np.asarray(reduced, dtype=np.float64)
    return reduced @ proj.components.T + proj.mean


@dataclass
class AdamState:
    """Adam optimizer state for one flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), t=0,
                   beta1=beta1, beta2=beta2, eps=eps)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray,
              lr: float) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update in the descent direction."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ValueError("params and grads must have the same shape")
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError("non-finite gradient component")

    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(m=m, v=v, t=t, beta1=state.beta1,
                          beta2=state.beta2, eps=state.eps)
    return new_params, new_state


def minmax_scale(scores: np.ndarray) -> np.ndarray:
    """Scale to [0,1] by (s - min)/(max - min); constant input maps to zeros."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size < 1:
        raise ValueError("empty score vector")
    lo = scores.min()
    hi = scores.max()
    if hi == lo:
        return np.zeros_like(scores)
    return (scores - lo) / (hi - lo)
