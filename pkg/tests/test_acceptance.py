"""End-to-end acceptance gate.

Each test prints one PASS/FAIL line for its criterion. The suite covers
gradient correctness, metric and HMM oracle equivalence, MDL optimality on
small series, segmentation recovery, end-to-end detection quality, training
dynamics, scoring scalability, and determinism of the full pipeline.
"""

import itertools
import math
import sys
import time

import numpy as np
import pytest

from missgan import cli
from missgan.data import SyntheticSpec, normalize_apply, synth_generate
from missgan.detector import anomaly_scores, auc, evaluate, ideal_f1
from missgan.hmmseg import (
    HmmParams,
    RegimeSet,
    Segmentation,
    baum_welch_fit,
    hmm_forward_loglik,
    mdl_cost,
    segment_series,
    viterbi,
)
from missgan.numerics import child_rng
from missgan.trainer import Checkpoint, TrainConfig, lr_at_epoch, missgan_fit
from missgan.recnet import (
    discriminator_loss_and_grads,
    generator_loss_and_grads,
    get_discriminator_params,
    get_generator_params,
    init_discriminator,
    init_reconstruction_model,
    set_discriminator_params,
    set_generator_params,
)


def report(name, ok, detail=""):
    line = f"{name}: {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f" ({detail})"
    print(line, file=sys.__stderr__, flush=True)
    from conftest import ACCEPTANCE_LINES
    ACCEPTANCE_LINES.append(line)


def rel_err(a, n):
    return np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))


class TestCriterion1Gradients:
    def test_analytic_gradients_match_finite_differences(self):
        t0 = time.time()
        step, lam = 1e-5, 0.1
        worst = 0.0
        for seed in range(10):
            rng = np.random.default_rng(seed)
            m = int(rng.integers(1, 4))
            c = int(rng.integers(0, 3))
            d_h = int(rng.integers(2, 9))
            l = int(rng.integers(2, 7))
            init_rng = child_rng(seed, "grad-check")
            model = init_reconstruction_model(m, c, d_h, init_rng)
            disc = init_discriminator(m, c, d_h, init_rng)
            x = rng.normal(size=(2, l, m))
            y = rng.normal(size=(2, l, c))

            _, grad_g, xr = generator_loss_and_grads(model, disc, x, y, lam)
            pg = get_generator_params(model)
            num_g = np.empty_like(grad_g)
            for i in range(pg.size):
                p = pg.copy()
                p[i] += step
                set_generator_params(model, p)
                up = generator_loss_and_grads(model, disc, x, y, lam)[0]
                p[i] -= 2 * step
                set_generator_params(model, p)
                dn = generator_loss_and_grads(model, disc, x, y, lam)[0]
                num_g[i] = (up - dn) / (2 * step)
            set_generator_params(model, pg)
            worst = max(worst, float(rel_err(grad_g, num_g).max()))

            _, grad_d = discriminator_loss_and_grads(disc, x, y, xr)
            pd = get_discriminator_params(disc)
            num_d = np.empty_like(grad_d)
            for i in range(pd.size):
                p = pd.copy()
                p[i] += step
                set_discriminator_params(disc, p)
                up = discriminator_loss_and_grads(disc, x, y, xr)[0]
                p[i] -= 2 * step
                set_discriminator_params(disc, p)
                dn = discriminator_loss_and_grads(disc, x, y, xr)[0]
                num_d[i] = (up - dn) / (2 * step)
            set_discriminator_params(disc, pd)
            worst = max(worst, float(rel_err(grad_d, num_d).max()))

        elapsed = time.time() - t0
        ok = worst < 1e-4 and elapsed < 60
        report("criterion 1 gradient correctness", ok,
               f"worst rel err {worst:.2e}, {elapsed:.1f}s")
        assert worst < 1e-4
        assert elapsed < 60


class TestCriterion2Oracles:
    def test_metrics_and_hmm_match_brute_force(self):
        t0 = time.time()
        rng = np.random.default_rng(42)
        metric_ok = True
        for _ in range(200):
            n = int(rng.integers(2, 51))
            scores = rng.integers(0, 15, size=n).astype(np.float64)
            labels = np.zeros(n, dtype=np.int64)
            labels[rng.choice(n, size=int(rng.integers(1, n)), replace=False)] = 1
            pos, neg = scores[labels == 1], scores[labels == 0]
            if len(neg):
                wins = sum((p > q) + 0.5 * (p == q) for p in pos for q in neg)
                metric_ok &= auc(scores, labels) == wins / (len(pos) * len(neg))
            best = 0.0
            for thr in np.unique(scores):
                pred = scores >= thr
                tp = int(np.sum(pred & (labels == 1)))
                fp = int(np.sum(pred & (labels == 0)))
                fn = int(np.sum(~pred & (labels == 1)))
                if tp:
                    best = max(best, 2 * tp / (2 * tp + fp + fn))
            metric_ok &= ideal_f1(scores, labels).ideal_f1 == best

        hmm_worst = 0.0
        for i in range(100):
            k = int(rng.integers(1, 4))
            l = int(rng.integers(1, 7))
            pi = rng.dirichlet(np.ones(k))
            a = rng.dirichlet(np.ones(k), size=k)
            theta = HmmParams(pi=pi, a=a, means=rng.normal(size=(k, 2)),
                              vars=rng.uniform(0.2, 2.0, size=(k, 2)))
            seq = rng.normal(size=(l, 2))
            total = 0.0
            best_ll, best_path = -np.inf, None
            for path in itertools.product(range(k), repeat=l):
                ll = math.log(pi[path[0]])
                for t in range(1, l):
                    ll += math.log(a[path[t - 1], path[t]])
                for t, s in enumerate(path):
                    diff = seq[t] - theta.means[s]
                    ll += float(np.sum(-0.5 * (np.log(2 * np.pi * theta.vars[s])
                                               + diff * diff / theta.vars[s])))
                total += math.exp(ll)
                if ll > best_ll:
                    best_ll, best_path = ll, path
            hmm_worst = max(hmm_worst,
                            abs(hmm_forward_loglik(seq, theta) - math.log(total)))
            vpath, vll = viterbi(seq, theta)
            hmm_worst = max(hmm_worst, abs(vll - best_ll))
            if not np.array_equal(vpath, best_path):
                hmm_worst = np.inf

        elapsed = time.time() - t0
        ok = metric_ok and hmm_worst < 1e-9 and elapsed < 60
        report("criterion 2 oracle equivalence", ok,
               f"hmm worst abs err {hmm_worst:.2e}, {elapsed:.1f}s")
        assert metric_ok
        assert hmm_worst < 1e-9
        assert elapsed < 60


def brute_min_mdl(series, alpha):
    t = series.shape[0]
    best = np.inf
    assigns_by_nseg = {1: [(0,)], 2: [(0, 0), (0, 1)],
                       3: [(0, 0, 0), (0, 0, 1), (0, 1, 0), (0, 1, 1)]}
    for ncuts in (0, 1, 2):
        for cuts in itertools.combinations(range(1, t), ncuts):
            cp = (0,) + cuts
            edges = list(cp) + [t]
            for asg in assigns_by_nseg[len(cp)]:
                r = max(asg) + 1
                thetas = [baum_welch_fit(
                    [series[edges[i]:edges[i + 1]]
                     for i in range(len(cp)) if asg[i] == g], k=1)
                    for g in range(r)]
                cost = mdl_cost(series, RegimeSet(tuple(thetas), np.full((r, r), 1.0 / r)),
                                Segmentation(t, cp, asg), alpha)
                best = min(best, cost)
    return best


class TestCriterion3MdlBruteForce:
    def test_accepted_cost_at_most_exhaustive_minimum(self):
        t0 = time.time()
        worst_gap = -np.inf
        for i in range(20):
            rng = np.random.default_rng(5000 + i)
            t = int(rng.integers(16, 31))
            if i % 2 == 0:
                series = rng.normal(size=(t, 1))
            else:
                cut = t // 2
                series = np.vstack([rng.normal(-3, 0.5, size=(cut, 1)),
                                    rng.normal(3, 0.5, size=(t - cut, 1))])
            seg, _ = segment_series(series, alpha=0.1, k=1, seed=i, max_regimes=2)
            worst_gap = max(worst_gap, seg.total_cost - brute_min_mdl(series, 0.1))
        elapsed = time.time() - t0
        ok = worst_gap <= 1e-6 and elapsed < 300
        report("criterion 3 MDL brute force", ok,
               f"worst gap {worst_gap:.2e} bits, {elapsed:.1f}s")
        assert worst_gap <= 1e-6
        assert elapsed < 300


class TestCriterion4SegmentationRecovery:
    def test_boundaries_recovered_within_five_ticks(self):
        t0 = time.time()
        hits = total = 0
        for seed in range(10):
            rng = np.random.default_rng(7000 + seed)
            blocks, regime, truth = [], 0, []
            pos = 0
            for _ in range(6):
                l = int(rng.integers(80, 121))
                mean = 0.0 if regime == 0 else 3.0
                blocks.append(rng.normal(mean, 1.0, size=(l, 1)))
                pos += l
                truth.append(pos)
                regime ^= 1
            truth = truth[:-1]
            series = np.vstack(blocks)
            seg, _ = segment_series(series, alpha=0.1, k=1, seed=seed,
                                    max_regimes=2)
            found = [c for c in seg.cut_points if c != 0]
            for b in truth:
                total += 1
                if any(abs(c - b) <= 5 for c in found):
                    hits += 1
        elapsed = time.time() - t0
        rate = hits / total
        ok = rate >= 0.9 and elapsed < 300
        report("criterion 4 segmentation recovery", ok,
               f"{hits}/{total} boundaries, {elapsed:.1f}s")
        assert rate >= 0.9
        assert elapsed < 300


@pytest.fixture(scope="module")
def detection_runs():
    t0 = time.time()
    runs = []
    for seed in (101, 202, 303):
        train = synth_generate(SyntheticSpec(ticks=10000, seed=seed))
        test = synth_generate(SyntheticSpec(
            ticks=2000, seed=seed + 1000, mode_block=512, spike_rate=0.02,
            spike_magnitude=4.0, mislabel_rate=0.08, mislabel_block=160))
        ck = missgan_fit(train, TrainConfig(seed=seed))
        rep = anomaly_scores(ck, normalize_apply(test, ck.norm_stats))
        res = evaluate(rep.scaled, test.labels)
        ab = missgan_fit(train, TrainConfig(seed=seed, segmentation=False))
        ab_rep = anomaly_scores(ab, normalize_apply(test, ab.norm_stats))
        ab_res = evaluate(ab_rep.scaled, test.labels)
        lg = [float(line.split("lg=")[1].split()[0])
              for line in ck.log if "lg=" in line]
        runs.append({"auc": res.auc, "f1": res.ideal_f1, "ab_auc": ab_res.auc,
                     "lg": lg})
    return runs, time.time() - t0


class TestCriterion5EndToEnd:
    def test_detection_quality_and_ablation_ordering(self, detection_runs):
        runs, elapsed = detection_runs
        med_auc = float(np.median([r["auc"] for r in runs]))
        med_f1 = float(np.median([r["f1"] for r in runs]))
        med_ab = float(np.median([r["ab_auc"] for r in runs]))
        ok = (med_auc >= 0.90 and med_f1 >= 0.80
              and med_auc >= med_ab - 0.02 and elapsed < 900)
        report("criterion 5 end-to-end detection", ok,
               f"AUC {med_auc:.3f}, F1 {med_f1:.3f}, ablation AUC {med_ab:.3f}, "
               f"{elapsed:.0f}s")
        assert med_auc >= 0.90
        assert med_f1 >= 0.80
        assert med_auc >= med_ab - 0.02
        assert elapsed < 900


class TestCriterion6TrainingDynamics:
    def test_generator_loss_halves_by_epoch_twenty(self, detection_runs):
        runs, _ = detection_runs
        drops = []
        for r in runs:
            lg = r["lg"]
            assert len(lg) >= 20
            drops.append((lg[0] - lg[19]) / lg[0])
        med = float(np.median(drops))
        ok = med >= 0.5
        report("criterion 6 training dynamics", ok, f"median L_G drop {med:.2f}")
        assert med >= 0.5


class TestCriterion7Scalability:
    def test_scoring_time_linear_in_series_length(self):
        series = synth_generate(SyntheticSpec(ticks=2000, seed=77))
        cfg = TrainConfig(l_init=64, d_r=2, d_h=8, max_scales=1, epochs=1,
                          hmm_states=1, seg_em_iters=5, seg_refine_rounds=1)
        ck = missgan_fit(series, cfg)
        sizes = [10_000, 100_000, 1_000_000]
        repeats = {10_000: 3, 100_000: 2, 1_000_000: 1}
        times = []
        warmed = False
        for t in sizes:
            big = synth_generate(SyntheticSpec(ticks=t, seed=88, mode_block=4096))
            norm = normalize_apply(big, ck.norm_stats)
            if not warmed:
                anomaly_scores(ck, norm)
                warmed = True
            best = np.inf
            for _ in range(repeats[t]):
                t0 = time.time()
                anomaly_scores(ck, norm)
                best = min(best, time.time() - t0)
            times.append(best)
        x = np.asarray(sizes, dtype=np.float64)
        y = np.asarray(times)
        slope, intercept = np.polyfit(x, y, 1)
        fitted = slope * x + intercept
        ss_res = float(np.sum((y - fitted) ** 2))
        ss_tot = float(np.sum((y - y.mean()) ** 2))
        r2 = 1.0 - ss_res / ss_tot
        per_tick = y / x
        ratio = float(per_tick.max() / per_tick.min())
        ms = ", ".join(f"{1000 * p:.4f}" for p in per_tick)
        ok = r2 >= 0.95 and ratio < 2.0
        report("criterion 7 linear scalability", ok,
               f"R2 {r2:.4f}, per-tick ratio {ratio:.2f}, ms/tick [{ms}]")
        assert r2 >= 0.95
        assert ratio < 2.0


class TestCriterion8Determinism:
    @staticmethod
    def _pipeline(root):
        root.mkdir()
        spec = root / "spec.cfg"
        spec.write_text("ticks = 600\nseed = 5\nspike_rate = 0.02\n"
                        "mislabel_rate = 0.05\n", encoding="utf-8")
        data, ckpt = str(root / "data.csv"), str(root / "model.ckpt")
        scores, metrics = str(root / "scores.csv"), str(root / "metrics.txt")
        assert cli.main(["synth", "--spec", str(spec), "--out", data]) == 0
        assert cli.main(["train", "--data", data, "--out", ckpt,
                         "--l_init", "64", "--d_h", "8", "--d_r", "2",
                         "--max_scales", "2", "--epochs", "2", "--seed", "3",
                         "--hmm_states", "1", "--seg_em_iters", "5",
                         "--seg_refine_rounds", "1", "--threads", "1"]) == 0
        assert cli.main(["score", "--checkpoint", ckpt, "--data", data,
                         "--out", scores]) == 0
        assert cli.main(["eval", "--scores", scores, "--out", metrics]) == 0
        return [root / "data.csv", root / "model.ckpt",
                root / "scores.csv", root / "metrics.txt"]

    def test_pipeline_bitwise_identical_and_lr_exact(self, tmp_path):
        files_a = self._pipeline(tmp_path / "a")
        files_b = self._pipeline(tmp_path / "b")
        bitwise = all(fa.read_bytes() == fb.read_bytes()
                      for fa, fb in zip(files_a, files_b))

        ck = Checkpoint.load(files_a[1])
        ck.save(tmp_path / "again.ckpt")
        round_trip = (tmp_path / "again.ckpt").read_bytes() == files_a[1].read_bytes()

        lrs = (lr_at_epoch(0.001, 0), lr_at_epoch(0.001, 8), lr_at_epoch(0.001, 16))
        lr_ok = lrs == (0.001, 0.00075, 0.0005625)

        ok = bitwise and round_trip and lr_ok
        report("criterion 8 determinism and formats", ok,
               f"bitwise={bitwise}, round_trip={round_trip}, lr={lrs}")
        assert bitwise
        assert round_trip
        assert lr_ok
