"""Two-tier HMM regime modeling with MDL-scored multi-scale cut-point
search over the PCA-reduced hidden representation.

Regimes are diagonal-Gaussian HMMs; a segmentation is scored in bits as
alpha * Cost_model + Cost_assign + Cost_like. Cut points come from Viterbi
decoding of an augmented two-regime model with regime switch probabilities
taken from the 2x2 transition matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import child_rng

VAR_FLOOR = 1e-6
BITS_PER_FLOAT = 32.0
LOG2E = 1.0 / math.log(2.0)
_LOG_STAR_C = math.log2(2.865064)


@dataclass(frozen=True)
class HmmParams:
    """One regime: k hidden states with diagonal Gaussian emissions."""

    pi: np.ndarray     # (k,)
    a: np.ndarray      # (k, k) row-stochastic
    means: np.ndarray  # (k, d)
    vars: np.ndarray   # (k, d), >= VAR_FLOOR

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=np.float64)
        a = np.asarray(self.a, dtype=np.float64)
        if abs(pi.sum() - 1.0) > 1e-9 or np.any(pi < 0):
            raise ValueError("pi must be a probability vector")
        if np.any(np.abs(a.sum(axis=1) - 1.0) > 1e-9) or np.any(a < 0):
            raise ValueError("every row of the transition matrix must sum to 1")
        if np.any(np.asarray(self.vars) < VAR_FLOOR - 1e-15):
            raise ValueError("variances below the variance floor")

    @property
    def k(self) -> int:
        return self.pi.shape[0]

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @property
    def n_free_params(self) -> int:
        return (self.k - 1) + self.k * (self.k - 1) + 2 * self.k * self.d


@dataclass(frozen=True)
class RegimeSet:
    """Fitted regimes plus the regime transition matrix."""

    regimes: tuple[HmmParams, ...]
    delta: np.ndarray  # (r, r) row-stochastic

    def __post_init__(self):
        object.__setattr__(self, "regimes", tuple(self.regimes))
        d = np.asarray(self.delta, dtype=np.float64)
        if len(self.regimes) < 1:
            raise ValueError("need at least one regime")
        if d.shape != (len(self.regimes),) * 2:
            raise ValueError("delta shape must match regime count")
        if np.any(np.abs(d.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("every delta row must sum to 1")

    @property
    def r(self) -> int:
        return len(self.regimes)

    @property
    def n_free_params(self) -> int:
        return sum(th.n_free_params for th in self.regimes) + self.r * (self.r - 1)


@dataclass(frozen=True)
class Segmentation:
    """Cut points and per-segment regime assignments tiling [0, T)."""

    t: int
    cut_points: tuple[int, ...]        # strictly increasing, starts at 0
    assignment: tuple[int, ...]        # regime id per segment
    total_cost: float = float("nan")   # bits, filled by segment_series

    def __post_init__(self):
        cp = tuple(int(c) for c in self.cut_points)
        object.__setattr__(self, "cut_points", cp)
        object.__setattr__(self, "assignment", tuple(int(a) for a in self.assignment))
        if not cp or cp[0] != 0:
            raise ValueError("cut points must start at 0")
        if any(b <= a for a, b in zip(cp, cp[1:])) or cp[-1] >= self.t:
            raise ValueError("cut points must be strictly increasing and < T")
        if len(self.assignment) != len(cp):
            raise ValueError("one assignment per segment")

    @property
    def segments(self) -> list[tuple[int, int]]:
        """(rho_j, l_j) pairs."""
        bounds = list(self.cut_points) + [self.t]
        return [(bounds[i], bounds[i + 1] - bounds[i]) for i in range(len(self.cut_points))]

    def export(self, path, alpha: float, r: int) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# T={self.t} r={r} alpha={alpha} cost_bits={self.total_cost}\n")
            for (rho, l), g in zip(self.segments, self.assignment):
                fh.write(f"{rho},{l},{g}\n")


def log_star(n: int) -> float:
    """Universal code length for a positive integer, in bits."""
    if n < 1:
        raise ValueError("log_star is defined for positive integers")
    total = _LOG_STAR_C
    v = math.log2(n)
    while v > 0:
        total += v
        v = math.log2(v) if v > 1 else 0.0
    return total


def _log_emissions(seq: np.ndarray, theta: HmmParams) -> np.ndarray:
    """(l, k) log densities of each tick under each state's Gaussian."""
    diff = seq[:, None, :] - theta.means[None, :, :]
    return -0.5 * np.sum(
        np.log(2.0 * np.pi * theta.vars)[None, :, :] + diff * diff / theta.vars[None, :, :],
        axis=2,
    )


def _logsumexp(a: np.ndarray, axis: int | None = None) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)  # rows of all -inf stay -inf
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m_safe), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis) if axis is not None else float(out)


def hmm_forward_loglik(seq: np.ndarray, theta: HmmParams) -> float:
    """Exact forward-algorithm log-likelihood (natural log), rescaled per step.

    Emission densities are scaled to a per-tick maximum of 1 and the forward
    vector is renormalized every step, so arbitrarily long sequences stay in
    range."""
    seq = np.atleast_2d(np.asarray(seq, dtype=np.float64))
    logb = _log_emissions(seq, theta)
    bmax = logb.max(axis=1)
    b = np.exp(logb - bmax[:, None])
    a = theta.a
    alpha = theta.pi * b[0]
    total = 0.0
    for t in range(1, seq.shape[0]):
        s = alpha.sum()
        if s <= 0.0:
            return float("-inf")
        total += math.log(s)
        alpha = (alpha / s) @ a * b[t]
    s = alpha.sum()
    if s <= 0.0:
        return float("-inf")
    return float(total + math.log(s) + bmax.sum())


def viterbi(seq: np.ndarray, theta: HmmParams) -> tuple[np.ndarray, float]:
    """Most likely state path; ties broken toward the lower state index."""
    seq = np.atleast_2d(np.asarray(seq, dtype=np.float64))
    logb = _log_emissions(seq, theta)
    with np.errstate(divide="ignore"):
        logpi = np.log(theta.pi)
        loga = np.log(theta.a)
    l, k = logb.shape
    delta = logpi + logb[0]
    back = np.zeros((l, k), dtype=np.int64)
    for t in range(1, l):
        scores = delta[:, None] + loga
        back[t] = np.argmax(scores, axis=0)  # first max = lowest index
        delta = scores[back[t], np.arange(k)] + logb[t]
    path = np.empty(l, dtype=np.int64)
    path[-1] = int(np.argmax(delta))
    for t in range(l - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path, float(delta[path[-1]])


def _kmeans_seed(data: np.ndarray, k: int, rng: np.random.Generator,
                 iters: int = 10) -> np.ndarray:
    """k-means++-style centers refined by a few Lloyd iterations."""
    n = data.shape[0]
    centers = [data[int(rng.integers(0, n))]]
    for _ in range(1, k):
        d2 = np.min([np.sum((data - c) ** 2, axis=1) for c in centers], axis=0)
        total = d2.sum()
        if total <= 0:
            centers.append(data[int(rng.integers(0, n))])
            continue
        centers.append(data[int(rng.choice(n, p=d2 / total))])
    centers = np.asarray(centers)
    for _ in range(iters):
        d2 = np.sum((data[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        labels = np.argmin(d2, axis=1)
        for j in range(k):
            pts = data[labels == j]
            if len(pts):
                centers[j] = pts.mean(axis=0)
    return centers


def _forward_backward(logb: np.ndarray, pi: np.ndarray, a: np.ndarray):
    """Scaled-linear forward/backward. Returns (loglik, gamma, xi_sum).

    Emissions are rescaled to a per-tick maximum of 1 and the forward vector
    renormalized each step; the scale factors cancel in gamma and xi."""
    l, k = logb.shape
    bmax = logb.max(axis=1)
    b = np.exp(logb - bmax[:, None])

    alpha = np.empty((l, k))
    c = np.empty(l)
    af = pi * b[0]
    c[0] = max(af.sum(), 1e-300)
    alpha[0] = af / c[0]
    for t in range(1, l):
        af = (alpha[t - 1] @ a) * b[t]
        c[t] = max(af.sum(), 1e-300)
        alpha[t] = af / c[t]
    loglik = float(np.log(c).sum() + bmax.sum())

    beta = np.empty((l, k))
    beta[-1] = 1.0
    for t in range(l - 2, -1, -1):
        beta[t] = (a @ (b[t + 1] * beta[t + 1])) / c[t + 1]

    gamma = alpha * beta
    gamma /= np.maximum(gamma.sum(axis=1, keepdims=True), 1e-300)

    xi_sum = a * (alpha[:-1].T @ (b[1:] * beta[1:] / c[1:, None])) if l > 1 \
        else np.zeros((k, k))
    return loglik, gamma, xi_sum


def baum_welch_fit(segments, k: int, seed: int = 0, max_iter: int = 100,
                   tol: float = 1e-6) -> HmmParams:
    """EM fit of a k-state diagonal-Gaussian HMM to one or more sequences."""
    seqs = [np.atleast_2d(np.asarray(s, dtype=np.float64)) for s in segments]
    seqs = [s for s in seqs if s.shape[0] > 0]
    if not seqs:
        raise ValueError("baum_welch_fit needs at least one nonempty sequence")
    if k < 1:
        raise ValueError("k must be >= 1")
    data = np.vstack(seqs)
    if data.shape[0] < k:
        raise ValueError("total ticks must be >= k")
    d = data.shape[1]
    rng = child_rng(seed, "baum-welch")

    means = _kmeans_seed(data, k, rng)
    d2 = np.sum((data[:, None, :] - means[None, :, :]) ** 2, axis=2)
    labels = np.argmin(d2, axis=1)
    vars_ = np.empty((k, d))
    global_var = np.maximum(data.var(axis=0), VAR_FLOOR)
    for j in range(k):
        pts = data[labels == j]
        vars_[j] = np.maximum(pts.var(axis=0), VAR_FLOOR) if len(pts) > 1 else global_var
    pi = np.full(k, 1.0 / k)
    a = np.full((k, k), 0.1 / max(k - 1, 1))
    np.fill_diagonal(a, 0.9 if k > 1 else 1.0)
    a /= a.sum(axis=1, keepdims=True)
    theta = HmmParams(pi=pi, a=a, means=means, vars=np.maximum(vars_, VAR_FLOOR))

    prev_ll = -np.inf
    for _ in range(max_iter):
        total_ll = 0.0
        pi_acc = np.zeros(k)
        xi_acc = np.zeros((k, k))
        g_acc = np.zeros(k)
        gx_acc = np.zeros((k, d))
        gxx_acc = np.zeros((k, d))
        for s in seqs:
            logb = _log_emissions(s, theta)
            ll, gamma, xi = _forward_backward(logb, theta.pi, theta.a)
            total_ll += ll
            pi_acc += gamma[0]
            xi_acc += xi
            g_acc += gamma.sum(axis=0)
            gx_acc += gamma.T @ s
            gxx_acc += gamma.T @ (s * s)

        pi = pi_acc / pi_acc.sum()
        row = xi_acc.sum(axis=1, keepdims=True)
        a = np.where(row > 0, xi_acc / np.maximum(row, 1e-300), 1.0 / k)
        a /= a.sum(axis=1, keepdims=True)
        denom = np.maximum(g_acc, 1e-300)[:, None]
        means = gx_acc / denom
        vars_ = np.maximum(gxx_acc / denom - means * means, VAR_FLOOR)
        theta = HmmParams(pi=pi, a=a, means=means, vars=vars_)

        if total_ll - prev_ll < tol and np.isfinite(prev_ll):
            break
        prev_ll = total_ll
    return theta


def mdl_cost(series: np.ndarray, regime_set: RegimeSet, seg: Segmentation,
             alpha: float) -> float:
    """Total description length in bits: alpha * model + assignment + likelihood."""
    series = np.atleast_2d(np.asarray(series, dtype=np.float64))
    if seg.t != series.shape[0]:
        raise ValueError("segmentation does not tile this series")
    cost_model = BITS_PER_FLOAT * regime_set.n_free_params
    cost_assign = 0.0
    cost_like = 0.0
    log2r = math.log2(regime_set.r) if regime_set.r > 1 else 0.0
    for (rho, l), g in zip(seg.segments, seg.assignment):
        cost_assign += log_star(l) + log2r
        cost_like += -hmm_forward_loglik(series[rho:rho + l], regime_set.regimes[g]) * LOG2E
    return alpha * cost_model + cost_assign + cost_like


def cut_point_search(series: np.ndarray, theta_a: HmmParams, theta_b: HmmParams,
                     delta: np.ndarray):
    """Decode an augmented two-regime HMM and cut where the path switches regime.

    Returns (cut points starting at 0, regime assignment per segment with
    0 = theta_a, 1 = theta_b)."""
    series = np.atleast_2d(np.asarray(series, dtype=np.float64))
    delta = np.asarray(delta, dtype=np.float64)
    ka, kb = theta_a.k, theta_b.k
    k = ka + kb
    pi = np.concatenate([0.5 * theta_a.pi, 0.5 * theta_b.pi])
    a = np.zeros((k, k))
    a[:ka, :ka] = delta[0, 0] * theta_a.a
    a[:ka, ka:] = delta[0, 1] * np.tile(theta_b.pi, (ka, 1))
    a[ka:, ka:] = delta[1, 1] * theta_b.a
    a[ka:, :ka] = delta[1, 0] * np.tile(theta_a.pi, (kb, 1))
    a /= a.sum(axis=1, keepdims=True)
    means = np.vstack([theta_a.means, theta_b.means])
    vars_ = np.vstack([theta_a.vars, theta_b.vars])
    aug = HmmParams(pi=pi / pi.sum(), a=a, means=means, vars=vars_)

    path, _ = viterbi(series, aug)
    regime = (path >= ka).astype(np.int64)
    cuts = [0]
    assignment = [int(regime[0])]
    for t in range(1, len(regime)):
        if regime[t] != regime[t - 1]:
            cuts.append(t)
            assignment.append(int(regime[t]))
    return cuts, assignment


def _fit_regimes_to_assignment(series, cuts, assignment, n_regimes, k, seed,
                               max_iter):
    bounds = list(cuts) + [series.shape[0]]
    regimes = []
    for g in range(n_regimes):
        segs = [series[bounds[i]:bounds[i + 1]]
                for i in range(len(cuts)) if assignment[i] == g]
        regimes.append(baum_welch_fit(segs, k, seed=seed + g, max_iter=max_iter))
    return regimes


def _estimate_delta(cuts, assignment, n_regimes, t_total) -> np.ndarray:
    """Per-tick stay/switch counts from the decoded segment sequence, with
    add-one smoothing so rows stay strictly positive."""
    counts = np.ones((n_regimes, n_regimes))
    bounds = list(cuts) + [t_total]
    for i, g in enumerate(assignment):
        stay = bounds[i + 1] - bounds[i] - 1
        counts[g, g] += stay
        if i + 1 < len(assignment):
            counts[g, assignment[i + 1]] += 1
    return counts / counts.sum(axis=1, keepdims=True)


def segment_series(series: np.ndarray, alpha: float, k: int = 4, seed: int = 0,
                   switch_prob: float = 0.01, em_iters: int = 50,
                   refine_rounds: int = 3, max_regimes: int = 8):
    """Top-down regime splitting driven by total MDL cost.

    Starts from a single regime over the whole series and repeatedly tries
    to split the regime with the largest likelihood cost into two; a split
    is kept only if the total description length strictly decreases.
    Returns (Segmentation, RegimeSet)."""
    series = np.atleast_2d(np.asarray(series, dtype=np.float64))
    t = series.shape[0]
    if t < 4:
        raise ValueError("series too short to segment (T < 4)")

    cuts = [0]
    assignment = [0]
    regimes = [baum_welch_fit([series], k, seed=seed, max_iter=em_iters)]
    delta = np.array([[1.0]])
    best = mdl_cost(series, RegimeSet(tuple(regimes), delta),
                    Segmentation(t, tuple(cuts), tuple(assignment)), alpha)

    frozen: set[int] = set()
    while len(regimes) < max_regimes:
        # likelihood cost of each regime's segments
        bounds = list(cuts) + [t]
        like_cost = np.zeros(len(regimes))
        for i, g in enumerate(assignment):
            seq = series[bounds[i]:bounds[i + 1]]
            like_cost[g] += -hmm_forward_loglik(seq, regimes[g]) * LOG2E
        # note: likelihood bit-costs can be negative (densities above 1),
        # so rank regimes without any sign cutoff
        order = np.argsort(like_cost)[::-1]
        candidates = [int(g) for g in order if int(g) not in frozen]
        if not candidates:
            break
        target = candidates[0]

        split = _try_split(series, cuts, assignment, regimes, target, k, alpha,
                           seed=seed + 101 * (len(regimes) + 1),
                           switch_prob=switch_prob, em_iters=em_iters,
                           refine_rounds=refine_rounds)
        if split is None:
            frozen.add(target)
            continue
        new_cuts, new_assignment, new_regimes, new_cost = split
        if new_cost < best:
            cuts, assignment, regimes = new_cuts, new_assignment, new_regimes
            best = new_cost
            frozen.clear()
        else:
            frozen.add(target)

    delta = _estimate_delta(cuts, assignment, len(regimes), t)
    regime_set = RegimeSet(tuple(regimes), delta)
    seg = Segmentation(t, tuple(cuts), tuple(assignment), total_cost=best)
    # recompute with the final delta so the reported cost matches the model
    final_cost = mdl_cost(series, regime_set, seg, alpha)
    seg = Segmentation(t, tuple(cuts), tuple(assignment), total_cost=final_cost)
    return seg, regime_set


def _try_split(series, cuts, assignment, regimes, target, k, alpha, seed,
               switch_prob, em_iters, refine_rounds):
    """Attempt to split one regime in two; returns the refined candidate
    solution and its cost, or None if the split degenerates."""
    t = series.shape[0]
    bounds = list(cuts) + [t]
    seg_idx = [i for i, g in enumerate(assignment) if g == target]
    seqs = [series[bounds[i]:bounds[i + 1]] for i in seg_idx]
    ticks = np.vstack(seqs)
    if ticks.shape[0] < 2 * k + 2:
        return None

    # seed the two halves by 2-way clustering of short-window means, which
    # separates slow regime structure that tick-level clustering misses
    rng = child_rng(seed, "split-seed")
    w = max(4, min(32, ticks.shape[0] // 8))
    n_win = ticks.shape[0] // w
    if n_win < 2:
        return None
    win_means = ticks[:n_win * w].reshape(n_win, w, -1).mean(axis=1)
    centers = _kmeans_seed(win_means, 2, rng)
    d2 = np.sum((win_means[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    win_labels = np.argmin(d2, axis=1)
    if win_labels.min() == win_labels.max():
        return None
    half_a = np.vstack([ticks[i * w:(i + 1) * w] for i in range(n_win) if win_labels[i] == 0])
    half_b = np.vstack([ticks[i * w:(i + 1) * w] for i in range(n_win) if win_labels[i] == 1])
    if half_a.shape[0] < k or half_b.shape[0] < k:
        return None
    theta_a = baum_welch_fit([half_a], k, seed=seed + 1, max_iter=em_iters)
    theta_b = baum_welch_fit([half_b], k, seed=seed + 2, max_iter=em_iters)
    delta2 = np.array([[1.0 - switch_prob, switch_prob],
                       [switch_prob, 1.0 - switch_prob]])

    sub = None
    for _ in range(refine_rounds):
        sub = []  # per target segment: (local cuts, local assignment)
        segs_a, segs_b = [], []
        for s in seqs:
            lc, la = cut_point_search(s, theta_a, theta_b, delta2)
            sub.append((lc, la))
            lb = lc + [s.shape[0]]
            for i, g in enumerate(la):
                (segs_a if g == 0 else segs_b).append(s[lb[i]:lb[i + 1]])
        if not segs_a or not segs_b:
            return None
        if sum(s.shape[0] for s in segs_a) < k or sum(s.shape[0] for s in segs_b) < k:
            return None
        theta_a = baum_welch_fit(segs_a, k, seed=seed + 3, max_iter=em_iters)
        theta_b = baum_welch_fit(segs_b, k, seed=seed + 4, max_iter=em_iters)

    # assemble the global candidate: target regime replaced by two new ones
    new_ids = {}
    new_regimes = []
    for g, th in enumerate(regimes):
        if g == target:
            continue
        new_ids[g] = len(new_regimes)
        new_regimes.append(th)
    id_a = len(new_regimes)
    new_regimes.extend([theta_a, theta_b])

    new_cuts, new_assignment = [], []
    sub_iter = iter(sub)
    for i, g in enumerate(assignment):
        start = bounds[i]
        if g != target:
            new_cuts.append(start)
            new_assignment.append(new_ids[g])
        else:
            lc, la = next(sub_iter)
            for c, a_ in zip(lc, la):
                new_cuts.append(start + c)
                new_assignment.append(id_a + a_)
    # merge adjacent segments assigned to the same regime
    merged_cuts, merged_assign = [new_cuts[0]], [new_assignment[0]]
    for c, a_ in zip(new_cuts[1:], new_assignment[1:]):
        if a_ == merged_assign[-1]:
            continue
        merged_cuts.append(c)
        merged_assign.append(a_)

    delta = _estimate_delta(merged_cuts, merged_assign, len(new_regimes), t)
    regime_set = RegimeSet(tuple(new_regimes), delta)
    seg = Segmentation(t, tuple(merged_cuts), tuple(merged_assign))
    cost = mdl_cost(series, regime_set, seg, alpha)
    return merged_cuts, merged_assign, new_regimes, cost
