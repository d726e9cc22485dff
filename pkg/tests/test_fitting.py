"""Tests for the fitting pipeline: objective, filtering, multi-start Adam,
s selection, and bootstrap intervals."""

import numpy as np
import pytest

from nqs import (
    DEFAULT_INIT_RANGES,
    FitConfig,
    FitFailureError,
    LayerNormConfig,
    NqsParams,
    RunConfig,
    ScalingDataset,
    ScalingRecord,
)
from nqs.core import nqs_loss, nqs_loss_layernorm
from nqs.fitting import (
    anchor_s_grid,
    bootstrap_ci,
    filter_small_batch,
    fit_nqs,
    huber,
    latin_hypercube,
    nqs_objective,
    select_s,
)
from nqs.simulator import DatasetDesign, generate_synthetic_dataset

THETA = NqsParams(p=1.3, P=20.0, q=1.1, Q=0.8, r=1.2, R=4.0, e_irr=1.2)

SMALL_CONFIG = FitConfig(n_inits=24, n_iters=300)


def record(n, b, k, loss, seq=512, tags=()):
    return ScalingRecord(
        n_params=n, batch=b, steps=k, seq_len=seq, loss=loss, tags=frozenset(tags)
    )


def synthetic_data(**kwargs):
    design = DatasetDesign(kind="isoflops", levels=3, models_per_level=6, train_levels=3)
    return generate_synthetic_dataset(THETA, design, **kwargs)


class TestHuber:
    def test_quadratic_branch(self):
        assert huber(0.0, 0.0005, 1e-3) == pytest.approx(1.25e-7, rel=1e-12)

    def test_linear_branch(self):
        assert huber(0.0, 0.01, 1e-3) == pytest.approx(9.5e-6, rel=1e-12)

    def test_identity_is_zero(self):
        assert huber(3.7, 3.7, 1e-3) == 0.0

    def test_symmetry_and_continuity_at_delta(self):
        delta = 1e-3
        assert huber(0.0, 0.4, delta) == huber(0.4, 0.0, delta)
        inside = huber(0.0, delta * (1 - 1e-12), delta)
        outside = huber(0.0, delta * (1 + 1e-12), delta)
        assert inside == pytest.approx(outside, rel=1e-9)
        assert huber(0.0, delta, delta) == pytest.approx(0.5 * delta * delta, rel=1e-12)

    def test_vectorized(self):
        out = huber(np.zeros(3), np.array([0.0, 0.0005, 0.01]), 1e-3)
        assert out == pytest.approx([0.0, 1.25e-7, 9.5e-6], rel=1e-12)


class TestLatinHypercube:
    def test_each_stratum_hit_once(self):
        draws = latin_hypercube([(0.0, 4.0)], 4, seed=0)
        strata = sorted(int(x) for x in draws[:, 0])
        assert strata == [0, 1, 2, 3]

    def test_stratification_many_dims(self):
        ranges = list(DEFAULT_INIT_RANGES.values())
        draws = latin_hypercube(ranges, 1000, seed=3)
        assert draws.shape == (1000, 7)
        for j, (lo, hi) in enumerate(ranges):
            cells = np.floor((draws[:, j] - lo) / (hi - lo) * 1000).astype(int)
            assert sorted(cells) == list(range(1000))

    def test_deterministic_per_seed(self):
        a = latin_hypercube([(0.0, 1.0), (2.0, 3.0)], 16, seed=9)
        b = latin_hypercube([(0.0, 1.0), (2.0, 3.0)], 16, seed=9)
        c = latin_hypercube([(0.0, 1.0), (2.0, 3.0)], 16, seed=10)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_validation(self):
        with pytest.raises(ValueError):
            latin_hypercube([(0.0, 1.0)], 0, seed=0)
        with pytest.raises(ValueError, match="empty"):
            latin_hypercube([(1.0, 1.0)], 4, seed=0)


class TestFilterSmallBatch:
    def test_equal_loss_twin_removes_record(self):
        data = ScalingDataset((record(50, 8, 100, 3.00), record(50, 4, 200, 2.99)))
        kept, removed = filter_small_batch(data, margin=0.05)
        assert [r.batch for r in kept] == [4]
        assert [r.batch for r in removed] == [8]

    def test_markedly_better_twin_keeps_record(self):
        data = ScalingDataset((record(50, 8, 100, 3.00), record(50, 4, 200, 2.90)))
        kept, removed = filter_small_batch(data, margin=0.05)
        assert len(kept) == 2
        assert len(removed) == 0

    def test_no_neighbor_keeps_record(self):
        data = ScalingDataset((record(50, 8, 100, 3.00), record(50, 4, 100, 2.99)))
        kept, removed = filter_small_batch(data, margin=0.05)
        assert len(kept) == 2

    def test_odd_batch_never_removed(self):
        data = ScalingDataset((record(50, 3, 100, 3.00), record(50, 1, 200, 3.00)))
        kept, removed = filter_small_batch(data, margin=0.05)
        assert len(kept) == 2

    def test_seq_len_must_match(self):
        data = ScalingDataset(
            (record(50, 8, 100, 3.00, seq=512), record(50, 4, 200, 2.99, seq=256))
        )
        kept, _ = filter_small_batch(data, margin=0.05)
        assert len(kept) == 2

    def test_idempotent(self):
        data = synthetic_data(noise_sd=0.1, seed=1)
        once, _ = filter_small_batch(data)
        twice, removed_again = filter_small_batch(once)
        assert len(removed_again) == 0
        assert [r.loss for r in twice] == [r.loss for r in once]

    def test_partition(self):
        data = synthetic_data(noise_sd=0.1, seed=2)
        kept, removed = filter_small_batch(data)
        assert len(kept) + len(removed) == len(data)


class TestNqsObjective:
    data = synthetic_data()

    def test_self_consistency_is_zero(self):
        assert nqs_objective(THETA, self.data) <= 1e-12

    def test_penalty_arithmetic(self):
        diverged = NqsParams(p=1.3, P=20.0, q=1.1, Q=2.5, r=1.2, R=4.0, e_irr=1.2)
        m = len(self.data)
        obj = nqs_objective(diverged, self.data, penalty=1e6)
        assert obj >= 1e6 / m

    def test_mse_and_huber_agree_below_delta(self):
        # residuals below delta: huber = 0.5 res^2, mse = res^2
        h = nqs_objective(THETA, self.data, kind="huber")
        m = nqs_objective(THETA, self.data, kind="mse")
        assert m == pytest.approx(2.0 * h, abs=1e-18)

    def test_permutation_invariance(self):
        recs = list(self.data)
        rng = np.random.default_rng(0)
        shuffled = ScalingDataset(tuple(recs[i] for i in rng.permutation(len(recs))))
        ref = nqs_objective(THETA, self.data)
        assert nqs_objective(THETA, shuffled) == pytest.approx(ref, abs=1e-18)

    def test_duplication_preserves_mean(self):
        noisy = synthetic_data(noise_sd=0.05, seed=3)
        doubled = ScalingDataset(tuple(noisy) + tuple(noisy))
        a = nqs_objective(THETA, noisy)
        assert nqs_objective(THETA, doubled) == pytest.approx(a, rel=1e-14)

    def test_layernorm_path(self):
        ln = LayerNormConfig(s=0.3)
        recs = tuple(self.data)[:3]
        direct = np.mean(
            [
                huber(np.log(nqs_loss_layernorm(THETA, r.run, ln)), np.log(r.loss))
                for r in recs
            ]
        )
        assert nqs_objective(THETA, ScalingDataset(recs), ln=ln) == pytest.approx(
            float(direct), rel=1e-14
        )

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            nqs_objective(THETA, ScalingDataset(()))


class TestFitConfig:
    def test_validation(self):
        with pytest.raises(ValueError, match="objective"):
            FitConfig(objective="l1")
        with pytest.raises(ValueError, match="init_ranges"):
            FitConfig(init_ranges={"p": (1.05, 2.5)})
        with pytest.raises(ValueError):
            FitConfig(n_inits=0)
        with pytest.raises(ValueError, match="clip"):
            FitConfig(clip=0.0)
        with pytest.raises(ValueError, match="huber_delta"):
            FitConfig(huber_delta=-1e-3)

    def test_thread_resolution(self, monkeypatch):
        monkeypatch.delenv("NQS_THREADS", raising=False)
        assert FitConfig().resolve_threads() == 1
        assert FitConfig(threads=3).resolve_threads() == 3
        monkeypatch.setenv("NQS_THREADS", "5")
        assert FitConfig().resolve_threads() == 5
        assert FitConfig(threads=2).resolve_threads() == 2


class TestFitNqs:
    def test_noiseless_smoke_fit(self):
        data = synthetic_data()
        report = fit_nqs(data, SMALL_CONFIG)
        assert report.objective < 1e-2
        assert report.objective == min(report.init_objectives)
        assert report.init_objectives.shape == (SMALL_CONFIG.n_inits,)
        assert 0 <= report.best_index < SMALL_CONFIG.n_inits
        assert 0 <= report.best_iteration <= SMALL_CONFIG.n_iters
        assert report.n_records_used + len(report.filtered_indices) == len(data)
        assert report.backend in ("python", "compiled")

    def test_deterministic(self):
        data = synthetic_data(noise_sd=0.02, seed=5)
        a = fit_nqs(data, SMALL_CONFIG)
        b = fit_nqs(data, SMALL_CONFIG)
        assert a.theta == b.theta
        assert a.objective == b.objective
        assert a.best_index == b.best_index

    def test_few_records_warns_but_fits(self):
        runs = [(100, 8, 50), (400, 8, 80), (1600, 16, 120)]
        recs = tuple(
            record(n, b, k, nqs_loss(THETA, RunConfig(n, b, k))) for n, b, k in runs
        )
        with pytest.warns(UserWarning, match="7"):
            report = fit_nqs(ScalingDataset(recs), FitConfig(n_inits=4, n_iters=20))
        assert np.isfinite(report.objective)

    def test_all_penalized_inits_fail_loudly(self):
        data = synthetic_data()
        ranges = dict(DEFAULT_INIT_RANGES, Q=(2.5, 19.0))
        config = FitConfig(n_inits=4, n_iters=1, init_ranges=ranges)
        with pytest.raises(FitFailureError, match="penalty region"):
            fit_nqs(data, config)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            fit_nqs(ScalingDataset(()), SMALL_CONFIG)

    def test_report_serializes(self):
        data = synthetic_data()
        report = fit_nqs(data, FitConfig(n_inits=4, n_iters=20))
        d = report.to_dict()
        assert d["version"] == 1
        assert d["kind"] == "nqs_fit"
        assert set(d["theta"]) == {"p", "P", "q", "Q", "r", "R", "e_irr"}
        assert d["config"]["n_inits"] == 4
        assert "selected_s" not in d


class TestSelectS:
    small_batch = ScalingDataset(
        tuple(
            record(
                8,
                1,
                k,
                nqs_loss_layernorm(
                    THETA, RunConfig(8, 1, k), LayerNormConfig(s=0.128)
                ),
            )
            for k in (8, 16, 32, 64)
        )
    )

    def test_recovers_generator_s_on_grid(self):
        grid = anchor_s_grid(8)  # anchor 8 * 0.02**2 = 0.0032, spans 2^-4..2^4
        best, curve = select_s(THETA, self.small_batch, grid)
        # 0.128 sits inside the grid within one step: closest grid point wins
        gaps = np.abs(np.log(np.asarray(grid)) - np.log(0.128))
        assert best == pytest.approx(float(grid[int(np.argmin(gaps))]))
        assert len(curve) == len(grid)
        assert [s for s, _ in curve] == sorted(s for s, _ in curve)

    def test_singleton_grid(self):
        best, curve = select_s(THETA, self.small_batch, [0.25])
        assert best == 0.25
        assert len(curve) == 1

    def test_ties_go_to_smaller_s(self):
        # Records with steps = 0 make the objective independent of s.
        flat = ScalingDataset((record(8, 1, 0, nqs_loss(THETA, RunConfig(8, 1, 0))),))
        best, curve = select_s(THETA, flat, [4.0, 1.0, 2.0])
        assert best == 1.0
        objs = {o for _, o in curve}
        assert len(objs) == 1

    def test_validation(self):
        with pytest.raises(ValueError, match="record"):
            select_s(THETA, ScalingDataset(()), [1.0])
        with pytest.raises(ValueError, match="nonempty"):
            select_s(THETA, self.small_batch, [])


class TestAnchorSGrid:
    def test_shape_and_values(self):
        grid = anchor_s_grid(1000, halvings=2)
        anchor = 1000 * 0.02**2
        assert grid == pytest.approx(anchor * np.array([0.25, 0.5, 1.0, 2.0, 4.0]))

    def test_default_span(self):
        grid = anchor_s_grid(8)
        assert grid.shape == (9,)
        assert grid[4] == pytest.approx(8 * 0.0004)


class TestBootstrapCI:
    config = FitConfig(n_inits=6, n_iters=60)

    def test_deterministic_and_ordered(self):
        data = synthetic_data(noise_sd=0.05, seed=7)
        queries = [RunConfig(200, 8, 100), RunConfig(5000, 16, 400)]
        a = bootstrap_ci(data, self.config, queries, trials=4, frac=0.6)
        b = bootstrap_ci(data, self.config, queries, trials=4, frac=0.6)
        assert a == b
        for lo, hi in a:
            assert lo <= hi

    def test_level_zero_collapses_to_median(self):
        data = synthetic_data(noise_sd=0.05, seed=7)
        queries = [RunConfig(200, 8, 100)]
        out = bootstrap_ci(data, self.config, queries, trials=4, frac=0.6, level=0.0)
        assert out[0][0] == out[0][1]

    def test_duplicated_records_give_zero_width(self):
        base = record(100, 8, 50, nqs_loss(THETA, RunConfig(100, 8, 50)))
        data = ScalingDataset((base,) * 12)
        queries = [RunConfig(100, 8, 50)]
        with pytest.warns(UserWarning):
            out = bootstrap_ci(
                data, FitConfig(n_inits=3, n_iters=30), queries, trials=3, frac=0.5
            )
        lo, hi = out[0]
        assert lo == hi

    def test_validation(self):
        data = synthetic_data()
        q = [RunConfig(100, 8, 50)]
        with pytest.raises(ValueError, match="frac"):
            bootstrap_ci(data, self.config, q, frac=1.0)
        with pytest.raises(ValueError, match="level"):
            bootstrap_ci(data, self.config, q, level=1.5)
        with pytest.raises(ValueError, match="trials"):
            bootstrap_ci(data, self.config, q, trials=1)
