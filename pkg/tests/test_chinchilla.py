"""Tests for the two-power-law baseline: formula, fit, and allocation."""

import math

import numpy as np
import pytest

from nqs import ScalingDataset, ScalingRecord
from nqs.chinchilla import (
    ChinFitConfig,
    ChinParams,
    chin_fit,
    chin_loss,
    chin_optimal_nd,
)
from nqs.fitting import huber

PHI = ChinParams(p=1.4, P=math.exp(2.0), q=1.2, Q=math.exp(3.0), e_irr=1.7)


def make_records(phi, sizes, token_counts):
    recs = []
    for n in sizes:
        for d in token_counts:
            recs.append(
                ScalingRecord(
                    n_params=int(n),
                    batch=1,
                    steps=int(d),
                    seq_len=1,
                    loss=chin_loss(phi, int(n), int(d)),
                    tags=frozenset(),
                )
            )
    return ScalingDataset(tuple(recs))


TRAIN = make_records(PHI, np.geomspace(1e5, 1e9, 6), np.geomspace(1e8, 1e11, 5))
HELD_OUT = [
    (int(n), int(d))
    for n, d in zip(np.geomspace(3e5, 3e8, 10), np.geomspace(2e8, 5e10, 10))
]


class TestChinLoss:
    def test_constant_model(self):
        phi = ChinParams(p=1.5, P=0.0, q=1.0, Q=0.0, e_irr=1.0)
        assert chin_loss(phi, 10, 10) == 1.0
        assert chin_loss(phi, 10**9, 10**12) == 1.0

    def test_single_power_term(self):
        phi = ChinParams(p=2.0, P=1.0, q=1.0, Q=0.0, e_irr=0.0)
        assert chin_loss(phi, 10, 1) == pytest.approx(0.1, rel=1e-14)

    def test_general_formula(self):
        a = PHI.p - 1.0
        expected = PHI.e_irr + PHI.P * 1e6 ** (-a) + PHI.Q * 1e9 ** (-a / PHI.q)
        assert chin_loss(PHI, 10**6, 10**9) == pytest.approx(expected, rel=1e-14)

    def test_monotone_decreasing_in_each_argument(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            phi = ChinParams(
                p=1.0 + rng.uniform(0.05, 1.5),
                P=rng.uniform(0.5, 100.0),
                q=rng.uniform(0.3, 2.5),
                Q=rng.uniform(0.5, 100.0),
                e_irr=rng.uniform(0.0, 3.0),
            )
            sizes = np.geomspace(10, 1e8, 12)
            a = phi.p - 1.0
            sweeps = [
                ([chin_loss(phi, n, 1e6) for n in sizes], phi.e_irr + phi.Q * 1e6 ** (-a / phi.q)),
                ([chin_loss(phi, 1e6, d) for d in sizes], phi.e_irr + phi.P * 1e6 ** (-a)),
            ]
            for seq, floor in sweeps:
                assert all(x >= y for x, y in zip(seq, seq[1:]))
                # strict while the decaying term is still representable
                # against the sweep's loss floor (it underflows to a tie
                # in floats once it drops below the floor's resolution)
                strict = [
                    x > y for x, y in zip(seq, seq[1:])
                    if (x - floor) > 1e-12 * max(floor, 1.0)
                ]
                assert strict and all(strict)

    def test_validation(self):
        with pytest.raises(ValueError):
            chin_loss(PHI, 0, 10)
        with pytest.raises(ValueError):
            chin_loss(PHI, 10, 0)


class TestChinParams:
    def test_field_validation(self):
        with pytest.raises(ValueError, match="p"):
            ChinParams(p=1.0, P=1.0, q=1.0, Q=1.0, e_irr=0.0)
        with pytest.raises(ValueError, match="q"):
            ChinParams(p=1.5, P=1.0, q=0.0, Q=1.0, e_irr=0.0)
        with pytest.raises(ValueError, match="P"):
            ChinParams(p=1.5, P=-1.0, q=1.0, Q=1.0, e_irr=0.0)
        with pytest.raises(ValueError, match="e_irr"):
            ChinParams(p=1.5, P=1.0, q=1.0, Q=1.0, e_irr=float("nan"))

    def test_array_round_trip(self):
        arr = PHI.as_array()
        assert ChinParams.from_array(arr) == PHI


class TestChinFit:
    def test_noiseless_round_trip(self):
        report = chin_fit(TRAIN)
        assert report.objective <= 1e-8
        held = [
            huber(math.log(chin_loss(report.phi, n, d)), math.log(chin_loss(PHI, n, d)))
            for n, d in HELD_OUT
        ]
        assert float(np.mean(held)) <= 1e-8
        assert report.n_records == len(TRAIN)

    def test_deterministic(self):
        config = ChinFitConfig(n_inits=32, n_iters=200)
        a = chin_fit(TRAIN, config)
        b = chin_fit(TRAIN, config)
        assert a.phi == b.phi
        assert a.objective == b.objective

    def test_duplicated_records_fit_identically(self):
        # The objective is a mean, so duplicating every record leaves the
        # minimizer unchanged; only float summation order differs.
        config = ChinFitConfig(n_inits=32, n_iters=200)
        doubled = ScalingDataset(tuple(TRAIN) + tuple(TRAIN))
        a = chin_fit(TRAIN, config).phi
        b = chin_fit(doubled, config).phi
        assert b.as_array() == pytest.approx(a.as_array(), rel=1e-6)
        for n, d in HELD_OUT:
            assert chin_loss(b, n, d) == pytest.approx(chin_loss(a, n, d), rel=1e-9)

    def test_underdetermined_rejected(self):
        few = ScalingDataset(tuple(TRAIN)[:4])
        with pytest.raises(ValueError, match="underdetermined"):
            chin_fit(few)

    def test_nan_loss_names_record(self):
        recs = list(TRAIN)
        recs[2] = ScalingRecord(
            n_params=recs[2].n_params,
            batch=1,
            steps=recs[2].steps,
            seq_len=1,
            loss=float("nan"),
            tags=frozenset(),
        )
        with pytest.raises(ValueError, match="record 2"):
            chin_fit(ScalingDataset(tuple(recs)))

    def test_unrefined_fit_still_reasonable(self):
        config = ChinFitConfig(n_inits=64, n_iters=400, refine=False)
        report = chin_fit(TRAIN, config)
        assert not report.refined
        assert report.objective < 1e-3

    def test_report_serializes(self):
        report = chin_fit(TRAIN, ChinFitConfig(n_inits=8, n_iters=50))
        d = report.to_dict()
        assert d["version"] == 1
        assert d["kind"] == "chinchilla_fit"
        assert set(d["phi"]) == {"p", "P", "q", "Q", "e_irr"}


class TestChinOptimalNd:
    def test_symmetric_split(self):
        phi = ChinParams(p=1.5, P=7.0, q=1.0, Q=7.0, e_irr=1.0)
        compute = 1e18
        n, d = chin_optimal_nd(phi, compute)
        assert n == pytest.approx(math.sqrt(compute / 6.0), rel=1e-5)
        assert d == pytest.approx(n, rel=1e-5)

    def test_constraint_exact(self):
        for compute in (1e12, 1e18, 1e21):
            n, d = chin_optimal_nd(PHI, compute)
            assert 6.0 * n * d == pytest.approx(compute, rel=1e-9)

    def test_matches_analytic_optimum(self):
        # Along the constraint, d/dx [P e^{-ax} + Q' e^{bx}] = 0 at
        # x* = ln(aP / (bQ')) / (a + b) with Q' = Q (C/6)^{-b}.
        compute = 1e19
        a = PHI.p - 1.0
        b = a / PHI.q
        qp = PHI.Q * (compute / 6.0) ** (-b)
        x_star = math.log(a * PHI.P / (b * qp)) / (a + b)
        n, _ = chin_optimal_nd(PHI, compute)
        assert math.log(n) == pytest.approx(x_star, abs=2e-6)

    def test_matches_dense_grid(self):
        compute = 1e19
        xs = np.linspace(0.0, math.log(compute / 6.0), 200_000)
        a = PHI.p - 1.0
        b = a / PHI.q
        losses = PHI.P * np.exp(-a * xs) + PHI.Q * np.exp(-b * (math.log(compute / 6.0) - xs))
        n_grid = math.exp(xs[int(np.argmin(losses))])
        n, _ = chin_optimal_nd(PHI, compute)
        assert n == pytest.approx(n_grid, rel=1e-3)

    def test_is_local_minimum_along_constraint(self):
        compute = 1e19
        n, d = chin_optimal_nd(PHI, compute)
        best = chin_loss(PHI, n, d)
        for bump in (0.99, 1.01):
            n2 = n * bump
            d2 = compute / (6.0 * n2)
            assert chin_loss(PHI, n2, d2) > best

    def test_degenerate_p_term(self):
        phi = ChinParams(p=1.5, P=0.0, q=1.0, Q=5.0, e_irr=1.0)
        with pytest.warns(UserWarning, match="tokens"):
            n, d = chin_optimal_nd(phi, 6e12)
        assert n == 1.0
        assert d == pytest.approx(1e12)

    def test_degenerate_q_term(self):
        phi = ChinParams(p=1.5, P=5.0, q=1.0, Q=0.0, e_irr=1.0)
        with pytest.warns(UserWarning, match="parameters"):
            n, d = chin_optimal_nd(phi, 6e12)
        assert n == pytest.approx(1e12)
        assert d == 1.0

    def test_constant_model_balanced(self):
        phi = ChinParams(p=1.5, P=0.0, q=1.0, Q=0.0, e_irr=1.0)
        with pytest.warns(UserWarning, match="balanced|optimal"):
            n, d = chin_optimal_nd(phi, 6e12)
        assert n == pytest.approx(d, rel=1e-12)

    def test_tiny_budget_rejected(self):
        with pytest.raises(ValueError, match="budget"):
            chin_optimal_nd(PHI, 1.0)
