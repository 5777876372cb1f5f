"""Ancestral sampling of event streams from the generative model.

Entities are born by homogeneous Poisson processes; each active user emits
rating times by its own Poisson process and rates a uniformly chosen born
item. Latents follow Brownian motion between an entity's event times, new
entities start at the running average of current latents (standard normal
for the very first entities), and ratings discretize a noisy inner product.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .events import (
    ITEM_BIRTH, RATING, USER_BIRTH, Event, ModelParams, RatingScale,
)
from .probit import discretize


@dataclass(frozen=True)
class SimConfig:
    params: ModelParams          # ground-truth variances
    scale: RatingScale
    user_rate: float             # user births per day
    item_rate: float             # item births per day
    rating_rate: float           # ratings per active user per day
    horizon: float               # days
    seed: int
    n_seed_users: int = 1        # entities present at t = 0
    n_seed_items: int = 1
    time_quantum: float = 0.0    # if > 0, rating times snap up to this grid

    def __post_init__(self):
        if min(self.user_rate, self.item_rate, self.rating_rate) <= 0:
            raise ValueError("rates must be positive")
        if self.time_quantum < 0:
            raise ValueError("time_quantum must be non-negative")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")


@dataclass
class TruthRecord:
    kind: str  # "user" | "item"
    id: str
    time: float
    value: np.ndarray


@dataclass
class SimResult:
    events: list[Event]
    truth: list[TruthRecord] = field(default_factory=list)


class _Latent:
    __slots__ = ("t", "v")

    def __init__(self, t, v):
        self.t = t
        self.v = v


def _advance(lat: _Latent, t: float, sigma2: float, rng) -> np.ndarray:
    tau = t - lat.t
    if tau > 0:
        if sigma2 > 0:
            lat.v = lat.v + rng.normal(0.0, np.sqrt(sigma2 * tau), size=lat.v.shape)
        lat.t = t
    return lat.v


def generate(cfg: SimConfig) -> SimResult:
    rng = np.random.default_rng(cfg.seed)
    p = cfg.params
    d = p.d
    T = cfg.horizon

    user_births = sorted(rng.uniform(0.0, T, rng.poisson(cfg.user_rate * T)))
    item_births = sorted(rng.uniform(0.0, T, rng.poisson(cfg.item_rate * T)))
    user_births = [0.0] * cfg.n_seed_users + list(user_births)
    item_births = [0.0] * cfg.n_seed_items + list(item_births)

    # (time, order-class, seq): births sort before ratings at equal times
    agenda: list[tuple[float, int, int, str, float]] = []
    seq = 0
    for tb in user_births:
        agenda.append((tb, 0, seq, "u", 0.0))
        seq += 1
    for tb in item_births:
        agenda.append((tb, 0, seq, "i", 0.0))
        seq += 1
    for uidx, tb in enumerate(user_births):
        n = rng.poisson(cfg.rating_rate * (T - tb))
        for tr in rng.uniform(tb, T, n):
            if cfg.time_quantum > 0.0:
                tr = math.ceil(tr / cfg.time_quantum) * cfg.time_quantum
            agenda.append((float(tr), 1, seq, "r", float(uidx)))
            seq += 1
    agenda.sort(key=lambda rec: (rec[0], rec[1], rec[2]))

    users: list[_Latent] = []
    items: list[_Latent] = []
    events: list[Event] = []
    truth: list[TruthRecord] = []
    sig_u0 = np.sqrt(p.sigma2_U0)
    sig_v0 = np.sqrt(p.sigma2_V0)
    sig_e = np.sqrt(p.sigma2_E)

    def born(kind, t):
        pool, s2, s0 = (users, p.sigma2_U, sig_u0) if kind == "u" else (items, p.sigma2_V, sig_v0)
        if not pool or t == 0.0:
            v = rng.normal(size=d)
        else:
            cur = np.mean([_advance(l, t, s2, rng) for l in pool], axis=0)
            v = cur + s0 * rng.normal(size=d)
        pool.append(_Latent(t, v))
        return len(pool) - 1, v

    for t, _, _, what, aux in agenda:
        if what == "u":
            idx, v = born("u", t)
            events.append(Event(t, USER_BIRTH, user=f"u{idx}"))
            truth.append(TruthRecord("user", f"u{idx}", t, v.copy()))
        elif what == "i":
            idx, v = born("i", t)
            events.append(Event(t, ITEM_BIRTH, item=f"i{idx}"))
            truth.append(TruthRecord("item", f"i{idx}", t, v.copy()))
        else:
            uidx = int(aux)
            if not items:
                continue  # nothing to rate yet
            iidx = int(rng.integers(len(items)))
            uv = _advance(users[uidx], t, p.sigma2_U, rng)
            iv = _advance(items[iidx], t, p.sigma2_V, rng)
            x = float(uv @ iv) + sig_e * rng.normal()
            level = discretize(x, cfg.scale)
            events.append(Event(t, RATING, user=f"u{uidx}", item=f"i{iidx}", level=level))
            truth.append(TruthRecord("user", f"u{uidx}", t, uv.copy()))
            truth.append(TruthRecord("item", f"i{iidx}", t, iv.copy()))

    return SimResult(events, truth)


def write_truth_csv(truth: list[TruthRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        d = len(truth[0].value) if truth else 0
        w.writerow(["entity", "kind", "time"] + [f"mean_{k}" for k in range(d)])
        for tr in truth:
            w.writerow([tr.id, tr.kind, repr(float(tr.time))]
                       + [repr(float(v)) for v in tr.value])
