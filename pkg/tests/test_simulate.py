"""Tests for the generative simulator: determinism, validity, distributional checks."""

import math
from collections import Counter, defaultdict

import numpy as np
from scipy.stats import norm

from srec.events import ModelParams, validate_log
from srec.probit import default_thresholds
from srec.simulate import SimConfig, generate, write_truth_csv

SCALE5 = default_thresholds(5, anchor=-1.5, step=1.0)

_NO_DRIFT = 1e-300  # numerically zero drift, still a valid parameter


def config(**kw):
    base = dict(
        params=ModelParams(1.0, 1e-2, 1e-2, 2),
        scale=SCALE5,
        user_rate=0.3,
        item_rate=0.3,
        rating_rate=2.0,
        horizon=60.0,
        seed=0,
    )
    base.update(kw)
    return SimConfig(**base)


class TestDeterminism:
    def test_same_seed_same_output(self):
        a = generate(config())
        b = generate(config())
        assert a.events == b.events
        assert len(a.truth) == len(b.truth)
        for ta, tb in zip(a.truth, b.truth):
            assert (ta.kind, ta.id, ta.time) == (tb.kind, tb.id, tb.time)
            np.testing.assert_array_equal(ta.value, tb.value)

    def test_different_seeds_differ(self):
        a = generate(config(seed=1))
        b = generate(config(seed=2))
        assert a.events != b.events


class TestLogValidity:
    def test_generated_log_is_clean(self):
        sim = generate(config())
        rep = validate_log(sim.events, K=SCALE5.K)
        assert rep.ok
        assert rep.n_events == len(sim.events)

    def test_every_rating_has_truth_records(self):
        sim = generate(config())
        n_ratings = sum(1 for e in sim.events if e.kind == "rate")
        n_births = len(sim.events) - n_ratings
        # one truth record per birth, two per rating (user and item values)
        assert len(sim.truth) == n_births + 2 * n_ratings

    def test_seed_entities_present_at_time_zero(self):
        sim = generate(config(n_seed_users=3, n_seed_items=2))
        at_zero = [e for e in sim.events if e.time == 0.0]
        assert sum(1 for e in at_zero if e.kind == "ubirth") == 3
        assert sum(1 for e in at_zero if e.kind == "ibirth") == 2


class TestZeroDriftLimit:
    def test_latents_constant_through_time(self):
        params = ModelParams(1.0, _NO_DRIFT, _NO_DRIFT, 2)
        sim = generate(config(params=params, rating_rate=5.0))
        series = defaultdict(list)
        for tr in sim.truth:
            series[(tr.kind, tr.id)].append(tr.value)
        assert any(len(vs) > 3 for vs in series.values())
        for vs in series.values():
            for v in vs[1:]:
                np.testing.assert_allclose(v, vs[0], atol=1e-8)


class TestRatingDistribution:
    def test_levels_follow_ordered_probit_cells(self):
        # One frozen user-item pair rated thousands of times: level
        # frequencies must match the Gaussian cell probabilities at the
        # pair's (constant) true likeness.
        params = ModelParams(1.0, _NO_DRIFT, _NO_DRIFT, 2)
        cfg = config(params=params, user_rate=1e-9, item_rate=1e-9,
                     rating_rate=100.0, horizon=100.0, seed=42)
        sim = generate(cfg)
        uv = {}
        for tr in sim.truth:
            uv.setdefault((tr.kind, tr.id), tr.value)
        mu = float(uv[("user", "u0")] @ uv[("item", "i0")])

        counts = Counter(e.level for e in sim.events if e.kind == "rate")
        n = sum(counts.values())
        assert n > 5000
        for level in range(1, SCALE5.K + 1):
            lo, hi = SCALE5.interval(level)
            prob = norm.cdf(hi - mu) - norm.cdf(lo - mu)
            se = math.sqrt(prob * (1 - prob) / n)
            assert abs(counts.get(level, 0) / n - prob) < 4 * se + 1e-4


class TestBrownianIncrements:
    def test_squared_increments_scale_with_elapsed_time(self):
        sigma2 = 0.05
        params = ModelParams(1.0, sigma2, _NO_DRIFT, 2)
        cfg = config(params=params, user_rate=1e-9, item_rate=1e-9,
                     rating_rate=150.0, horizon=100.0, seed=7)
        sim = generate(cfg)
        path = [(tr.time, tr.value) for tr in sim.truth
                if (tr.kind, tr.id) == ("user", "u0")]
        stats = []
        for (t0, v0), (t1, v1) in zip(path, path[1:]):
            tau = t1 - t0
            if tau > 0:
                stats.append(float(np.sum((v1 - v0) ** 2)) / (2 * tau))
        n = len(stats)
        assert n > 5000
        # each term is sigma2 * chi^2_2 / 2: mean sigma2, variance sigma2^2
        se = sigma2 / math.sqrt(n)
        assert abs(np.mean(stats) - sigma2) < 4 * se


class TestTruthCsv:
    def test_plain_parseable_floats(self, tmp_path):
        sim = generate(config())
        path = tmp_path / "truth.csv"
        write_truth_csv(sim.truth, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "entity,kind,time,mean_0,mean_1"
        cells = lines[1].split(",")
        float(cells[2]), float(cells[3]), float(cells[4])
        assert len(lines) == len(sim.truth) + 1
