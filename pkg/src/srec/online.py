"""Online filtering: event-time posterior updates and instantaneous prediction.

Each user/item carries a Gaussian posterior over its topic vector that is
touched only by events naming it. Between events the mean is constant and
the covariance grows linearly with elapsed time; at an event batch the
touched posteriors are refined by coordinate ascent over user moments,
item moments and per-rating truncated-Gaussian likeness means.
"""

from __future__ import annotations

import csv
import logging
import math
import time as _time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import lapack

from .events import (
    ITEM_BIRTH, RATING, USER_BIRTH,
    Event, LatentState, ModelParams, RatingScale, iter_batches,
)
from ._kernels import batch_ascent, single_ascent

log = logging.getLogger(__name__)

MAX_PASSES = 50
MEAN_TOL = 1e-5
_JITTER = 1e-9

# The coordinate-ascent objective has a saddle at exactly-zero means (joint
# sign flip of all topics leaves the model invariant), and exact zeros are a
# fixed point of the updates. Seeding zero iterates with a tiny deterministic
# offset lets the ascent either fall back to zero (weak evidence) or descend
# into the symmetry-broken optimum (strong evidence). No RNG: the direction
# hashes the entity id, so replay stays bit-identical.
SYMMETRY_EPS = 1e-3


def _seed_direction(id_: str, d: int) -> np.ndarray:
    import hashlib
    raw = b"".join(
        hashlib.blake2b(id_.encode(), digest_size=64, salt=str(blk).encode()).digest()
        for blk in range((d + 7) // 8)
    )[:8 * d]
    ints = np.frombuffer(raw, dtype=np.uint64).astype(np.float64)
    vec = ints / np.float64(2**63) - 1.0
    norm = float(np.linalg.norm(vec))
    return vec / norm if norm > 0 else np.ones(d) / math.sqrt(d)


class UnknownEntityError(KeyError):
    pass


class DuplicateEntityError(ValueError):
    pass


def spd_inv(a: np.ndarray) -> np.ndarray:
    """Inverse of a symmetric positive-definite matrix via Cholesky.

    A failed factorization (rounding pushed an eigenvalue below zero) is
    retried once with a small diagonal jitter.
    """
    c, info = lapack.dpotrf(a, lower=1)
    if info != 0:
        c, info = lapack.dpotrf(a + _JITTER * np.eye(a.shape[0]), lower=1)
        if info != 0:
            raise np.linalg.LinAlgError(f"matrix not SPD (dpotrf info={info})")
    inv, info = lapack.dpotri(c, lower=1)
    if info != 0:
        raise np.linalg.LinAlgError(f"dpotri failed (info={info})")
    inv = np.tril(inv)
    return inv + np.tril(inv, -1).T


def propagate(state: LatentState, to: float, sigma2: float) -> LatentState:
    """Diffuse a posterior forward in time: mean fixed, covariance + s2*tau*I."""
    tau = to - state.last_event_time
    if tau < 0:
        raise ValueError(f"cannot propagate backwards (tau={tau})")
    if tau == 0.0:
        return LatentState(state.mean, state.cov, state.last_event_time)
    cov = state.cov + (sigma2 * tau) * np.eye(state.cov.shape[0])
    return LatentState(state.mean, cov, to)


@dataclass
class EntityUpdate:
    """Moments of one touched entity before and after a batch."""
    kind: str  # "user" | "item"
    id: str
    prior_mean: np.ndarray
    prior_cov: np.ndarray
    post_mean: np.ndarray
    post_cov: np.ndarray
    born: bool


@dataclass
class RatingUpdate:
    """Converged per-rating quantities from one batch."""
    user: str
    item: str
    level: int
    mu_prior: float  # likeness from pre-batch means (the prequential prediction)
    mu_post: float   # likeness from converged means
    x_mean: float    # converged truncated-Gaussian mean E[X]


@dataclass
class BatchResult:
    time: float
    entity_updates: list[EntityUpdate]
    rating_updates: list[RatingUpdate]
    iterations: int


@dataclass
class StreamMetrics:
    n_batches: int = 0
    n_events: int = 0
    n_ratings: int = 0
    n_births: int = 0
    total_iterations: int = 0
    wall_seconds: float = 0.0


class FilterState:
    """All per-entity posteriors plus the running global mean sums."""

    def __init__(self, params: ModelParams, scale: RatingScale):
        self.params = params
        self.scale = scale
        self.users: dict[str, LatentState] = {}
        self.items: dict[str, LatentState] = {}
        d = params.d
        self.user_mean_sum = np.zeros(d)
        self.item_mean_sum = np.zeros(d)
        self.now = 0.0
        self._sigma_e = math.sqrt(params.sigma2_E)
        # when False, skip building per-entity update records (pure streaming)
        self.collect_updates = True

    # -- births ---------------------------------------------------------

    def _birth(self, table, mean_sum, sigma2_0, id_, t):
        if id_ in table:
            raise DuplicateEntityError(f"entity {id_!r} already born")
        if t < self.now:
            raise ValueError(f"birth at {t} precedes current time {self.now}")
        d = self.params.d
        if not table or t == 0.0:
            mean = np.zeros(d)
            cov = np.eye(d)
        else:
            mean = mean_sum / len(table)
            cov = sigma2_0 * np.eye(d)
        state = LatentState(mean, cov, t)
        table[id_] = state
        mean_sum += mean
        return state

    def birth_user(self, id_: str, t: float) -> LatentState:
        return self._birth(self.users, self.user_mean_sum, self.params.sigma2_U0, id_, t)

    def birth_item(self, id_: str, t: float) -> LatentState:
        return self._birth(self.items, self.item_mean_sum, self.params.sigma2_V0, id_, t)

    # -- predictions ----------------------------------------------------

    def predict_likeness(self, user: str, item: str, t: float | None = None) -> float:
        """Posterior expectation of the latent likeness X_ij.

        Means are constant between events, so no propagation is needed and
        the result does not depend on t.
        """
        try:
            u = self.users[user]
            v = self.items[item]
        except KeyError as exc:
            raise UnknownEntityError(*exc.args) from None
        return float(u.mean @ v.mean)

    def predict_rating(self, user: str, item: str, t: float | None = None) -> int:
        from .probit import discretize
        return discretize(self.predict_likeness(user, item, t), self.scale)

    # -- batch update ---------------------------------------------------

    def process_batch(self, batch: Sequence[Event]) -> BatchResult:
        t = batch[0].time
        for ev in batch:
            if ev.time != t:
                raise ValueError("batch must share one timestamp")
        if t < self.now:
            raise ValueError(f"batch time {t} precedes current time {self.now}")

        p = self.params
        births: list[EntityUpdate] = []
        ratings: list[Event] = []
        for ev in batch:
            if ev.kind == USER_BIRTH:
                st = self.birth_user(ev.user, t)
                births.append(EntityUpdate("user", ev.user, st.mean, st.cov,
                                           st.mean, st.cov, born=True))
            elif ev.kind == ITEM_BIRTH:
                st = self.birth_item(ev.item, t)
                births.append(EntityUpdate("item", ev.item, st.mean, st.cov,
                                           st.mean, st.cov, born=True))
            else:
                ratings.append(ev)

        if not ratings:
            self.now = t
            return BatchResult(t, births, [], 0)

        if len(ratings) == 1 and not births:
            return self._process_single(ratings[0], t)

        # gather touched entities, propagated to t (fixed priors for all passes)
        for ev in ratings:
            if ev.user not in self.users or ev.item not in self.items:
                raise UnknownEntityError(f"rating ({ev.user}, {ev.item}) references unborn entity")
        d = p.d
        uids: list[str] = []
        vids: list[str] = []
        u_index: dict[str, int] = {}
        v_index: dict[str, int] = {}
        n_r = len(ratings)
        r_u = np.empty(n_r, dtype=np.int64)
        r_v = np.empty(n_r, dtype=np.int64)
        r_lo = np.empty(n_r)
        r_hi = np.empty(n_r)
        for idx, ev in enumerate(ratings):
            k = u_index.get(ev.user)
            if k is None:
                k = u_index[ev.user] = len(uids)
                uids.append(ev.user)
            r_u[idx] = k
            k = v_index.get(ev.item)
            if k is None:
                k = v_index[ev.item] = len(vids)
                vids.append(ev.item)
            r_v[idx] = k
            r_lo[idx], r_hi[idx] = self.scale.interval(ev.level)

        eye = np.eye(d)

        def _stack(ids, table, sigma2):
            m0 = np.empty((len(ids), d))
            p0 = np.empty((len(ids), d, d))
            for k, id_ in enumerate(ids):
                st = table[id_]
                m0[k] = st.mean
                tau = t - st.last_event_time
                p0[k] = st.cov + (sigma2 * tau) * eye if tau > 0 else st.cov
            return m0, p0

        m0_u, p0_u = _stack(uids, self.users, p.sigma2_U)
        m0_v, p0_v = _stack(vids, self.items, p.sigma2_V)

        sigma_e = self._sigma_e
        mu_prior = np.einsum("rk,rk->r", m0_u[r_u], m0_v[r_v])

        mean_u, cov_u = m0_u.copy(), p0_u.copy()
        mean_v, cov_v = m0_v.copy(), p0_v.copy()
        for ids, means in ((uids, mean_u), (vids, mean_v)):
            for k, id_ in enumerate(ids):
                if not means[k].any():
                    means[k] = SYMMETRY_EPS * _seed_direction(id_, d)

        x, iters = batch_ascent(
            m0_u, p0_u, mean_u, cov_u, m0_v, p0_v, mean_v, cov_v,
            r_u, r_v, r_lo, r_hi, sigma_e, MEAN_TOL, MAX_PASSES)
        if iters >= MAX_PASSES:
            log.warning("batch at t=%g: no convergence after %d passes", t, MAX_PASSES)

        # write back and adjust global sums by the mean deltas
        updates = list(births)
        for ids, table, mean_sum, kind, m0, p0, means, covs in (
            (uids, self.users, self.user_mean_sum, "user", m0_u, p0_u, mean_u, cov_u),
            (vids, self.items, self.item_mean_sum, "item", m0_v, p0_v, mean_v, cov_v),
        ):
            for k, id_ in enumerate(ids):
                mean_sum += means[k] - m0[k]
                table[id_] = LatentState(means[k], covs[k], t)
                if self.collect_updates:
                    updates.append(EntityUpdate(kind, id_, m0[k], p0[k], means[k], covs[k],
                                                born=False))

        rating_updates = [
            RatingUpdate(ev.user, ev.item, ev.level, float(mu_prior[i]),
                         float(mean_u[r_u[i]] @ mean_v[r_v[i]]), float(x[i]))
            for i, ev in enumerate(ratings)
        ]
        self.now = t
        return BatchResult(t, updates, rating_updates, iters)

    def _process_single(self, ev: Event, t: float) -> BatchResult:
        """Fast path for the common case: one rating, no births."""
        p = self.params
        su = self.users.get(ev.user)
        sv = self.items.get(ev.item)
        if su is None or sv is None:
            raise UnknownEntityError(f"rating ({ev.user}, {ev.item}) references unborn entity")
        # means are exactly zero only before an entity's first rating, so test
        # the first coordinate before paying for the full scan
        m_u, m_v = su.mean, sv.mean
        init_u = m_u if m_u[0] != 0.0 or m_u.any() else SYMMETRY_EPS * _seed_direction(ev.user, p.d)
        init_v = m_v if m_v[0] != 0.0 or m_v.any() else SYMMETRY_EPS * _seed_direction(ev.item, p.d)
        lo, hi = self.scale.interval(ev.level)
        p0_u, p0_v, mean_u, cov_u, mean_v, cov_v, mu_prior, mu_post, x, iters = single_ascent(
            m_u, su.cov, t - su.last_event_time, p.sigma2_U, init_u,
            m_v, sv.cov, t - sv.last_event_time, p.sigma2_V, init_v,
            lo, hi, self._sigma_e, MEAN_TOL, MAX_PASSES)
        if iters >= MAX_PASSES:
            log.warning("batch at t=%g: no convergence after %d passes", t, MAX_PASSES)
        self.user_mean_sum += mean_u - su.mean
        self.item_mean_sum += mean_v - sv.mean
        self.users[ev.user] = LatentState(mean_u, cov_u, t)
        self.items[ev.item] = LatentState(mean_v, cov_v, t)
        self.now = t
        updates = [
            EntityUpdate("user", ev.user, su.mean, p0_u, mean_u, cov_u, born=False),
            EntityUpdate("item", ev.item, sv.mean, p0_v, mean_v, cov_v, born=False),
        ] if self.collect_updates else []
        return BatchResult(t, updates, [RatingUpdate(ev.user, ev.item, ev.level,
                                                     mu_prior, mu_post, x)], iters)

    def run_stream(
        self,
        events: Sequence[Event],
        recorder: Callable[[BatchResult], None] | None = None,
    ) -> StreamMetrics:
        """Process a sorted event log batch by batch."""
        metrics = StreamMetrics()
        prev_collect = self.collect_updates
        self.collect_updates = recorder is not None
        t0 = _time.perf_counter()
        try:
            for batch in iter_batches(events):
                res = self.process_batch(batch)
                metrics.n_batches += 1
                metrics.n_events += len(batch)
                metrics.n_ratings += len(res.rating_updates)
                metrics.n_births += len(batch) - len(res.rating_updates)
                metrics.total_iterations += res.iterations
                if recorder is not None:
                    recorder(res)
        finally:
            self.collect_updates = prev_collect
        metrics.wall_seconds = _time.perf_counter() - t0
        return metrics

    # -- audits & IO ------------------------------------------------------

    def audit_sums(self, tol: float = 1e-8) -> None:
        """O(m+n) recompute of the running mean sums (debug aid)."""
        for name, table, acc in (("user", self.users, self.user_mean_sum),
                                 ("item", self.items, self.item_mean_sum)):
            exact = np.zeros(self.params.d)
            for st in table.values():
                exact += st.mean
            err = float(np.max(np.abs(exact - acc))) if table.values() else 0.0
            if err > tol:
                raise AssertionError(f"{name} mean sum drift {err:g}")

    def save_snapshot(self, path) -> None:
        p, scale = self.params, self.scale
        d = p.d
        tri = np.tril_indices(d)
        with open(path, "w", newline="") as fh:
            fh.write(f"# srec-snapshot d={d} K={scale.K}\n")
            fh.write("# params "
                     f"sigma2_E={p.sigma2_E!r} sigma2_U={p.sigma2_U!r} sigma2_V={p.sigma2_V!r} "
                     f"sigma2_U0={p.sigma2_U0!r} sigma2_V0={p.sigma2_V0!r}\n")
            fh.write("# thresholds " + ",".join(repr(v) for v in scale.thresholds) + "\n")
            fh.write(f"# now {self.now!r}\n")
            w = csv.writer(fh)
            w.writerow(["kind", "id", "last_event_time"]
                       + [f"mean_{k}" for k in range(d)]
                       + [f"cov_{i}_{j}" for i, j in zip(*tri)])
            for kind, table in (("user", self.users), ("item", self.items)):
                for id_, st in table.items():
                    w.writerow([kind, id_, repr(float(st.last_event_time))]
                               + [repr(float(v)) for v in st.mean]
                               + [repr(float(v)) for v in st.cov[tri]])

    @classmethod
    def load_snapshot(cls, path) -> "FilterState":
        with open(path) as fh:
            head = fh.readline().split()
            d = int(head[2].split("=")[1])
            K = int(head[3].split("=")[1])
            pline = dict(kv.split("=") for kv in fh.readline().split()[2:])
            thresholds = tuple(float(v) for v in fh.readline().split()[2].split(","))
            now = float(fh.readline().split()[2])
            params = ModelParams(
                sigma2_E=float(pline["sigma2_E"]), sigma2_U=float(pline["sigma2_U"]),
                sigma2_V=float(pline["sigma2_V"]), d=d,
                sigma2_U0=float(pline["sigma2_U0"]), sigma2_V0=float(pline["sigma2_V0"]))
            fs = cls(params, RatingScale(K=K, thresholds=thresholds))
            fs.now = now
            tri = np.tril_indices(d)
            r = csv.reader(fh)
            next(r)  # column header
            for row in r:
                kind, id_, last = row[0], row[1], float(row[2])
                mean = np.array([float(v) for v in row[3:3 + d]])
                cov = np.zeros((d, d))
                cov[tri] = [float(v) for v in row[3 + d:]]
                cov = cov + np.tril(cov, -1).T
                st = LatentState(mean, cov, last)
                if kind == "user":
                    fs.users[id_] = st
                    fs.user_mean_sum += mean
                else:
                    fs.items[id_] = st
                    fs.item_mean_sum += mean
        return fs
