"""Dataset ingestion, prequential evaluation, correlation-decay analytics
and figure-data exports.

The prequential protocol streams every event strictly before a sampled
reference time through the online filter, then scores predictions on the
ratings of the following window; windows across repeats never overlap.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .events import (
    RATING, SECONDS_PER_DAY, Event, ModelParams, RatingScale,
    auto_insert_births, iter_batches,
)
from .online import BatchResult, FilterState
from .probit import default_thresholds

log = logging.getLogger(__name__)


# -- ingestion ------------------------------------------------------------

@dataclass
class MovieLensData:
    events: list[Event]           # births auto-inserted, time-sorted
    K: int
    star_step: float              # star value per level (0.5 for half-star data)
    mean_level: float             # global mean over all ratings
    n_users: int
    n_items: int
    n_ratings: int

    def star_of(self, level_value: float) -> float:
        return level_value * self.star_step


def load_movielens(path, max_bad_fraction: float = 0.01) -> MovieLensData:
    """Read a ratings.csv (userId,movieId,rating,timestamp) into an event log."""
    rows: list[tuple[float, str, str, float]] = []
    bad: list[int] = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        cols = {name.strip(): i for i, name in enumerate(header)}
        try:
            iu, ii, ir, it = (cols[c] for c in ("userId", "movieId", "rating", "timestamp"))
        except KeyError as exc:
            raise ValueError(f"missing column {exc} in {path}") from None
        for lineno, row in enumerate(r, start=2):
            try:
                rows.append((float(row[it]) / SECONDS_PER_DAY,
                             row[iu], row[ii], float(row[ir])))
            except (ValueError, IndexError):
                bad.append(lineno)
    if not rows:
        raise ValueError(f"no ratings in {path}")
    if bad:
        log.warning("%d malformed rows (first lines: %s)", len(bad), bad[:10])
        if len(bad) > max_bad_fraction * (len(bad) + len(rows)):
            raise ValueError(f"{len(bad)} malformed rows exceeds {max_bad_fraction:.0%}")

    half_star = any((star * 2) % 2 != 0 for _, _, _, star in rows)
    star_step = 0.5 if half_star else 1.0
    K = int(round(max(star for _, _, _, star in rows) / star_step))
    K = max(K, 2)

    rows.sort(key=lambda rec: rec[0])  # timsort is stable: ties keep file order
    events = []
    levels = []
    for t, u, i, star in rows:
        level = int(round(star / star_step))
        level = min(max(level, 1), K)
        levels.append(level)
        events.append(Event(t, RATING, user=f"u{u}", item=f"i{i}", level=level))
    events = auto_insert_births(events)
    return MovieLensData(
        events=events,
        K=K,
        star_step=star_step,
        mean_level=float(np.mean(levels)),
        n_users=len({e.user for e in events if e.kind == RATING}),
        n_items=len({e.item for e in events if e.kind == RATING}),
        n_ratings=len(levels),
    )


def centered_scale(K: int, mean_level: float) -> RatingScale:
    """Level boundaries at k+0.5, shifted so the mean level sits at 0."""
    return default_thresholds(K, anchor=1.5 - mean_level, step=1.0)


# -- metrics ---------------------------------------------------------------

def rmse(pred, truth) -> float:
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise ValueError("empty sequences")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


# -- prequential evaluation -------------------------------------------------

@dataclass(frozen=True)
class EvalProtocol:
    horizon: float = 7.0          # days
    split_fraction: float = 0.5   # base-training share of ratings
    repeats: int = 10
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.split_fraction < 1:
            raise ValueError("split_fraction must be in (0,1)")
        if self.horizon <= 0 or self.repeats < 1:
            raise ValueError("invalid protocol")


@dataclass
class EvalResult:
    rmse_per_repeat: list[float]
    rmse_mean: float
    rmse_std: float
    baseline_rmse: float          # running-global-mean predictor on the same pairs
    n_pairs: int
    reference_times: list[float]


def sample_reference_times(
    lo: float, hi: float, horizon: float, repeats: int, seed: int,
) -> list[float]:
    """Uniform reference times in [lo, hi] with pairwise disjoint windows."""
    if hi < lo:
        raise ValueError("candidate interval empty")
    rng = np.random.default_rng(seed)
    refs: list[float] = []
    for _ in range(200000):
        if len(refs) == repeats:
            break
        cand = float(rng.uniform(lo, hi))
        if all(abs(cand - r) >= horizon for r in refs):
            refs.append(cand)
    if len(refs) < repeats:
        raise ValueError("could not place disjoint test windows; "
                         "reduce repeats or horizon")
    return sorted(refs)


def prequential_eval(
    events: list[Event],
    params: ModelParams,
    protocol: EvalProtocol,
    K: int,
    star_step: float = 1.0,
    star_clip: tuple[float, float] | None = None,
) -> EvalResult:
    """Stream-train up to each reference time, score the following window.

    Predictions are the continuous likeness mapped back to star units and
    clipped to the scale range; only test ratings whose user and item were
    both seen before the reference time are scored.
    """
    ratings = [ev for ev in events if ev.kind == RATING]
    if not ratings:
        raise ValueError("log has no ratings")
    n_base = max(int(protocol.split_fraction * len(ratings)), 1)
    split_time = ratings[n_base - 1].time
    end_time = ratings[-1].time
    base_mean = float(np.mean([ev.level for ev in ratings[:n_base]]))
    scale = centered_scale(K, base_mean)
    if star_clip is None:
        star_clip = (1.0 * star_step, K * star_step)

    refs = sample_reference_times(
        split_time, max(end_time - protocol.horizon, split_time),
        protocol.horizon, protocol.repeats, protocol.seed)

    fs = FilterState(params, scale)
    per_repeat: list[float] = []
    used_refs: list[float] = []
    base_sq = 0.0
    n_pairs = 0
    ev_idx = 0
    n_events = len(events)
    # running mean of levels seen so far (the global-mean baseline)
    lvl_sum = 0.0
    lvl_n = 0

    def feed_until(t: float):
        nonlocal ev_idx, lvl_sum, lvl_n
        while ev_idx < n_events and events[ev_idx].time < t:
            j = ev_idx
            tt = events[ev_idx].time
            while j < n_events and events[j].time == tt and events[j].time < t:
                j += 1
            batch = events[ev_idx:j]
            fs.process_batch(batch)
            for ev in batch:
                if ev.kind == RATING:
                    lvl_sum += ev.level
                    lvl_n += 1
            ev_idx = j

    for ref in refs:
        feed_until(ref)
        run_mean = lvl_sum / lvl_n if lvl_n else base_mean
        preds, truths = [], []
        for ev in ratings:
            if ev.time < ref:
                continue
            if ev.time >= ref + protocol.horizon:
                break
            if ev.user not in fs.users or ev.item not in fs.items:
                continue
            level_value = fs.predict_likeness(ev.user, ev.item) + base_mean
            star = min(max(level_value * star_step, star_clip[0]), star_clip[1])
            preds.append(star)
            truths.append(ev.level * star_step)
            base_sq += (run_mean * star_step - ev.level * star_step) ** 2
        if not preds:
            log.warning("empty test window at reference %.2f, skipping", ref)
            continue
        per_repeat.append(rmse(preds, truths))
        used_refs.append(ref)
        n_pairs += len(preds)

    if not per_repeat:
        raise ValueError("all test windows were empty")
    return EvalResult(
        rmse_per_repeat=per_repeat,
        rmse_mean=float(np.mean(per_repeat)),
        rmse_std=float(np.std(per_repeat)),
        baseline_rmse=math.sqrt(base_sq / n_pairs),
        n_pairs=n_pairs,
        reference_times=used_refs,
    )


# -- correlation decay -------------------------------------------------------

@dataclass
class CorrelationCurve:
    delta_days: np.ndarray
    values: np.ndarray
    half_time: float  # days


def correlation_decay(
    fs: FilterState, side: str, delta_grid, at_time: float | None = None,
) -> CorrelationCurve:
    """Mean squared auto-correlation of latent topics against look-ahead time.

    Per entity the curve is tr(C) / (tr(C) + d*delta*sigma2) with C the
    posterior covariance at the reference time; the half-time is where the
    averaged curve crosses 0.5.
    """
    if side == "user":
        table, sigma2 = fs.users, fs.params.sigma2_U
    elif side == "item":
        table, sigma2 = fs.items, fs.params.sigma2_V
    else:
        raise ValueError("side must be 'user' or 'item'")
    if not table:
        raise ValueError("no entities on that side")
    if sigma2 <= 0:
        raise ValueError("drift variance must be positive")
    t_ref = fs.now if at_time is None else at_time
    d = fs.params.d
    traces = np.array([
        float(np.trace(st.cov)) + d * sigma2 * max(t_ref - st.last_event_time, 0.0)
        for st in table.values()
    ])
    grid = np.asarray(delta_grid, dtype=float)
    values = np.array([float(np.mean(traces / (traces + d * dt * sigma2))) for dt in grid])

    def mean_corr(dt):
        return float(np.mean(traces / (traces + d * dt * sigma2)))

    lo, hi = 0.0, 1.0
    while mean_corr(hi) > 0.5:
        hi *= 2.0
        if hi > 1e12:
            break
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mean_corr(mid) > 0.5:
            lo = mid
        else:
            hi = mid
    return CorrelationCurve(grid, values, half_time=0.5 * (lo + hi))


def write_correlation_csv(curve: CorrelationCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["delta_days", "correlation_sq"])
        for dt, v in zip(curve.delta_days, curve.values):
            w.writerow([repr(float(dt)), repr(float(v))])


# -- trajectory export --------------------------------------------------------

class TrajectoryExporter:
    """Recorder capturing posterior-mean time series for plotting.

    Pass it to FilterState.run_stream; per-pair likeness series are sampled
    afterwards at requested instants (means are constant between events).
    """

    def __init__(self, pairs: list[tuple[str, str]] | None = None):
        self.pairs = pairs or []
        self.series: dict[tuple[str, str], list[tuple[float, np.ndarray]]] = {}
        self.enabled = True

    def __call__(self, res: BatchResult) -> None:
        for eu in res.entity_updates:
            key = (eu.kind, eu.id)
            self.series.setdefault(key, []).append((res.time, eu.post_mean))

    def _mean_at(self, kind: str, id_: str, t: float) -> np.ndarray | None:
        pts = self.series.get((kind, id_))
        if not pts or pts[0][0] > t:
            return None
        best = pts[0][1]
        for tt, m in pts:
            if tt > t:
                break
            best = m
        return best

    def pair_series(self, user: str, item: str, sample_times) -> list[tuple[float, float]]:
        out = []
        for t in sample_times:
            mu = self._mean_at("user", user, t)
            mv = self._mean_at("item", item, t)
            if mu is None or mv is None:
                continue
            out.append((float(t), float(mu @ mv)))
        return out

    def write_csv(self, path, sample_times=None) -> None:
        if not self.enabled:
            raise RuntimeError("recording disabled")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "kind", "entity_or_pair", "dim", "value"])
            for (kind, id_), pts in self.series.items():
                for t, mean in pts:
                    for dim, v in enumerate(mean):
                        w.writerow([repr(t), kind, id_, dim, repr(float(v))])
            if sample_times is not None:
                for user, item in self.pairs:
                    for t, v in self.pair_series(user, item, sample_times):
                        w.writerow([repr(t), "pair", f"{user}|{item}", 0, repr(v)])
