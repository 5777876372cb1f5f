"""Offline variational EM for the model variances.

E-step: run the online filter forward over the full history, recording each
entity's filtered posterior at its own event times, then smooth backward per
entity with the Brownian transition (a Rauch-Tung-Striebel pass on an
irregular time grid). M-step: closed-form averages of smoothed squared
residuals (noise variance) and smoothed squared increments per unit time
(drift variances).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from ._kernels import pair_increments, rating_residual, rts_smooth
from .events import Event, ModelParams, RatingScale
from .online import BatchResult, FilterState, StreamMetrics

log = logging.getLogger(__name__)

_VAR_FLOOR = 1e-12


@dataclass
class TrajectoryRecord:
    """Filtered moments of one entity at each of its own event times.

    means/covs are the post-update (filtered) moments the smoother consumes;
    prior_means/prior_covs are the propagated pre-update moments.
    """
    id: str
    kind: str  # "user" | "item"
    times: list[float] = field(default_factory=list)
    means: list[np.ndarray] = field(default_factory=list)
    covs: list[np.ndarray] = field(default_factory=list)
    prior_means: list[np.ndarray] = field(default_factory=list)
    prior_covs: list[np.ndarray] = field(default_factory=list)


@dataclass
class SmoothedTrajectory:
    """Backward-smoothed marginals plus adjacent-time cross moments."""
    id: str
    kind: str
    times: np.ndarray        # (n,)
    means: np.ndarray        # (n, d)
    covs: np.ndarray         # (n, d, d)
    cross_covs: np.ndarray   # (n-1, d, d), [k] = Cov(state_{k+1}, state_k | all data)

    def pair_terms(self) -> list[tuple[float, float]]:
        """(E[squared increment], elapsed time) per adjacent event-time pair."""
        e2, tau = pair_increments(
            np.asarray(self.times), np.asarray(self.means),
            np.asarray(self.covs), np.asarray(self.cross_covs))
        return list(zip(e2.tolist(), tau.tolist()))


@dataclass
class RatingRecord:
    user: str
    item: str
    level: int
    time: float
    mu_prior: float  # pre-update prediction, used for training RMSE
    u_idx: int       # index into the user's trajectory times
    v_idx: int


class ForwardRecorder:
    """Collects per-entity trajectories and per-rating records from a stream run."""

    def __init__(self):
        self.users: dict[str, TrajectoryRecord] = {}
        self.items: dict[str, TrajectoryRecord] = {}
        self.ratings: list[RatingRecord] = []

    def __call__(self, res: BatchResult) -> None:
        for eu in res.entity_updates:
            table = self.users if eu.kind == "user" else self.items
            tr = table.get(eu.id)
            if tr is None:
                tr = table[eu.id] = TrajectoryRecord(eu.id, eu.kind)
            if tr.times and tr.times[-1] == res.time:
                # entity born and rated in the same batch: keep the final posterior
                tr.means[-1] = eu.post_mean
                tr.covs[-1] = eu.post_cov
            else:
                tr.times.append(res.time)
                tr.means.append(eu.post_mean)
                tr.covs.append(eu.post_cov)
                tr.prior_means.append(eu.prior_mean)
                tr.prior_covs.append(eu.prior_cov)
        for ru in res.rating_updates:
            self.ratings.append(RatingRecord(
                ru.user, ru.item, ru.level, res.time, ru.mu_prior,
                len(self.users[ru.user].times) - 1,
                len(self.items[ru.item].times) - 1))


def forward_pass(
    events: list[Event], params: ModelParams, scale: RatingScale,
) -> tuple[ForwardRecorder, FilterState, StreamMetrics]:
    """Filter the full log, recording filtered moments at every event time."""
    fs = FilterState(params, scale)
    rec = ForwardRecorder()
    metrics = fs.run_stream(events, recorder=rec)
    return rec, fs, metrics


def smooth_entity(traj: TrajectoryRecord, sigma2: float) -> SmoothedTrajectory:
    """Backward Gaussian smoothing along one entity's event times.

    The transition between adjacent event times is identity-mean with
    covariance sigma2*tau*I, so the smoother gain is P_k (P_k + sigma2*tau*I)^-1.
    """
    n = len(traj.times)
    if n == 0:
        raise ValueError("empty trajectory")
    times = np.asarray(traj.times)
    sm, sc, cross = rts_smooth(times, np.asarray(traj.means), np.asarray(traj.covs), sigma2)
    return SmoothedTrajectory(traj.id, traj.kind, times, sm, sc, cross)


@dataclass
class SmoothedStats:
    """Sufficient statistics feeding the M-step."""
    n_ratings: int = 0
    sum_sq_residual: float = 0.0      # sum of E[(X - U'V)^2] over ratings
    user_pairs: list[tuple[float, float]] = field(default_factory=list)
    item_pairs: list[tuple[float, float]] = field(default_factory=list)


def gather_stats(
    rec: ForwardRecorder, params: ModelParams, scale: RatingScale,
) -> SmoothedStats:
    """Smooth every entity and accumulate M-step statistics.

    Rating likeness moments are rebuilt from the smoothed means (one
    refinement pass of the truncated-Gaussian update with smoothed inputs).
    """
    stats = SmoothedStats()
    su = {id_: smooth_entity(tr, params.sigma2_U) for id_, tr in rec.users.items()}
    sv = {id_: smooth_entity(tr, params.sigma2_V) for id_, tr in rec.items.items()}
    for s in su.values():
        stats.user_pairs.extend(s.pair_terms())
    for s in sv.values():
        stats.item_pairs.extend(s.pair_terms())

    sigma_e = math.sqrt(params.sigma2_E)
    for rr in rec.ratings:
        u = su[rr.user]
        v = sv[rr.item]
        lo, hi = scale.interval(rr.level)
        stats.sum_sq_residual += rating_residual(
            u.means[rr.u_idx], u.covs[rr.u_idx],
            v.means[rr.v_idx], v.covs[rr.v_idx], sigma_e, lo, hi)
        stats.n_ratings += 1
    return stats


def estimate_sigma_E(stats: SmoothedStats) -> float:
    if stats.n_ratings == 0:
        raise ValueError("no ratings")
    return max(stats.sum_sq_residual / stats.n_ratings, _VAR_FLOOR)


def _pair_estimate(pairs: list[tuple[float, float]]) -> float:
    if not pairs:
        raise ValueError("no adjacent event-time pairs")
    total = 0.0
    for e2, tau in pairs:
        total += e2 / tau
    # dimension-normalized: the transition covariance is sigma2*tau per coordinate
    return total


def estimate_sigma_U(stats: SmoothedStats, d: int) -> float:
    return max(_pair_estimate(stats.user_pairs) / (len(stats.user_pairs) * d), _VAR_FLOOR)


def estimate_sigma_V(stats: SmoothedStats, d: int) -> float:
    return max(_pair_estimate(stats.item_pairs) / (len(stats.item_pairs) * d), _VAR_FLOOR)


@dataclass
class EMConfig:
    max_iters: int = 30
    tol: float = 1e-3  # max relative parameter change
    level_to_value = None  # optional callable mapping level -> numeric value
    # Fixed-point acceleration: the variance updates contract very slowly
    # (each estimate largely echoes the value the filter assumed), so after
    # every four plain updates the local linear map q_{n+1} ~ A q_n + b is
    # fitted from the last step differences in log space and the iterate
    # jumps to that map's fixed point. Plain updates and the extrapolated
    # jumps share fixed points, so the limit is unchanged.
    accelerate: bool = True


_EXTRAP_WINDOW = 5                   # log-iterates needed for one extrapolation
_EXTRAP_MAX_LOG_JUMP = math.log(4.0)  # per-parameter clip on each jump


def _extrapolate_fixed_point(zs: list[np.ndarray]) -> np.ndarray | None:
    """Jump toward the fixed point of the locally-fitted linear iteration map.

    zs holds the last five log-parameter iterates. The fitted map must be a
    contraction (otherwise its fixed point is a repeller and extrapolating
    toward it diverges), and each parameter moves at most a factor of four
    per jump so a locally-poor fit cannot overshoot far; repeated cycles
    still reach the fixed point geometrically. Returns None when the fit is
    degenerate or expanding.
    """
    steps = [zs[i + 1] - zs[i] for i in range(4)]
    d0 = np.column_stack(steps[0:3])
    d1 = np.column_stack(steps[1:4])
    try:
        a = d1 @ np.linalg.inv(d0)
        if np.max(np.abs(np.linalg.eigvals(a))) >= 1.0:
            return None
        z = np.linalg.solve(np.eye(len(zs[0])) - a, zs[4] - a @ zs[3])
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(z)):
        return None
    return zs[4] + np.clip(z - zs[4], -_EXTRAP_MAX_LOG_JUMP, _EXTRAP_MAX_LOG_JUMP)


@dataclass
class EMTraceRow:
    iteration: int
    sigma2_E: float
    sigma2_U: float
    sigma2_V: float
    train_rmse: float


def _train_rmse(rec: ForwardRecorder, scale: RatingScale, level_to_value) -> float:
    """Prequential RMSE of the pre-update likeness predictions, in level units.

    The latent likeness lives on the (centered) threshold axis; map it back
    to a continuous level via the threshold spacing before comparing.
    """
    if not rec.ratings:
        return float("nan")
    step = scale.thresholds[2] - scale.thresholds[1] if scale.K > 2 else 1.0
    offset = 1.5 - scale.thresholds[1] / step
    sq = 0.0
    for rr in rec.ratings:
        pred = min(max(rr.mu_prior / step + offset, 1.0), float(scale.K))
        if level_to_value is None:
            truth = float(rr.level)
        else:
            truth = level_to_value(rr.level)
            pred = level_to_value(pred)
        sq += (pred - truth) ** 2
    return math.sqrt(sq / len(rec.ratings))


def default_em_init(d: int) -> ModelParams:
    """Recommended starting point for variance fitting.

    The drift-variance updates mostly echo the value the filter assumed:
    from above they descend steadily, from below they barely move. Starting
    the drift variances above the plausible range lets the fit descend to
    the fixed point instead of stalling near the initializer.
    """
    return ModelParams(sigma2_E=1.0, sigma2_U=0.1, sigma2_V=0.1, d=d)


def em_fit(
    events: list[Event],
    init: ModelParams,
    scale: RatingScale,
    config: EMConfig | None = None,
) -> tuple[ModelParams, list[EMTraceRow]]:
    """Alternate forward filtering, smoothing and closed-form variance updates."""
    config = config or EMConfig()
    params = init
    trace: list[EMTraceRow] = []
    zs = [np.log([params.sigma2_E, params.sigma2_U, params.sigma2_V])]
    for it in range(1, config.max_iters + 1):
        rec, _, _ = forward_pass(events, params, scale)
        stats = gather_stats(rec, params, scale)
        new = replace(
            params,
            sigma2_E=estimate_sigma_E(stats),
            sigma2_U=estimate_sigma_U(stats, params.d),
            sigma2_V=estimate_sigma_V(stats, params.d),
        )
        for name in ("sigma2_E", "sigma2_U", "sigma2_V"):
            if not math.isfinite(getattr(new, name)):
                raise ArithmeticError(f"EM produced non-finite {name} at iteration {it}")
        rel = max(
            abs(new.sigma2_E - params.sigma2_E) / params.sigma2_E,
            abs(new.sigma2_U - params.sigma2_U) / params.sigma2_U,
            abs(new.sigma2_V - params.sigma2_V) / params.sigma2_V,
        )
        zs.append(np.log([new.sigma2_E, new.sigma2_U, new.sigma2_V]))
        if config.accelerate and len(zs) >= _EXTRAP_WINDOW:
            z = _extrapolate_fixed_point(zs[-_EXTRAP_WINDOW:])
            if z is not None:
                q = np.exp(z)
                new = replace(new, sigma2_E=float(q[0]), sigma2_U=float(q[1]),
                              sigma2_V=float(q[2]))
                zs = [z]
        rmse = _train_rmse(rec, scale, config.level_to_value)
        trace.append(EMTraceRow(it, new.sigma2_E, new.sigma2_U, new.sigma2_V, rmse))
        params = new
        log.info("EM iter %d: sE2=%.4g sU2=%.4g sV2=%.4g rmse=%.4f rel=%.3g",
                 it, new.sigma2_E, new.sigma2_U, new.sigma2_V, rmse, rel)
        if rel < config.tol:
            break
    return params, trace


def write_trace_csv(trace: list[EMTraceRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "sigma2_E", "sigma2_U", "sigma2_V", "train_rmse"])
        for row in trace:
            w.writerow([row.iteration, repr(row.sigma2_E), repr(row.sigma2_U),
                        repr(row.sigma2_V), repr(row.train_rmse)])
