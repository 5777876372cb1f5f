"""Core domain types: events, rating scales, model parameters, latent states.

Time is continuous and measured in days. An event log is a time-sorted
sequence of user births, item births and ratings; several events may share
one timestamp (an event batch).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Sequence

import numpy as np

SECONDS_PER_DAY = 86400.0

USER_BIRTH = "ubirth"
ITEM_BIRTH = "ibirth"
RATING = "rate"

_KINDS = (USER_BIRTH, ITEM_BIRTH, RATING)


@dataclass(frozen=True)
class Event:
    """One stream record: a user birth, an item birth, or a rating."""

    time: float
    kind: str
    user: str | None = None
    item: str | None = None
    level: int | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")
        if self.time < 0:
            raise ValueError(f"negative event time {self.time}")
        if self.kind == USER_BIRTH and not self.user:
            raise ValueError("user birth needs a user id")
        if self.kind == ITEM_BIRTH and not self.item:
            raise ValueError("item birth needs an item id")
        if self.kind == RATING and (not self.user or not self.item or self.level is None):
            raise ValueError("rating needs user, item and level")


@dataclass(frozen=True)
class RatingScale:
    """Ordered set of K levels defined by thresholds partitioning the real line.

    ``thresholds`` has K+1 entries, the first -inf and the last +inf,
    strictly increasing. A latent value x maps to level k when x lies in
    (thresholds[k-1], thresholds[k]].
    """

    K: int
    thresholds: tuple[float, ...]

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("need at least two levels")
        if len(self.thresholds) != self.K + 1:
            raise ValueError("thresholds must have K+1 entries")
        if not math.isinf(self.thresholds[0]) or self.thresholds[0] > 0:
            raise ValueError("first threshold must be -inf")
        if not math.isinf(self.thresholds[-1]) or self.thresholds[-1] < 0:
            raise ValueError("last threshold must be +inf")
        for a, b in zip(self.thresholds, self.thresholds[1:]):
            if not a < b:
                raise ValueError("thresholds must be strictly increasing")

    def interval(self, level: int) -> tuple[float, float]:
        """Open-closed interval (lo, hi] of latent values for a level."""
        if not 1 <= level <= self.K:
            raise ValueError(f"level {level} outside 1..{self.K}")
        return self.thresholds[level - 1], self.thresholds[level]


@dataclass(frozen=True)
class ModelParams:
    """Learned variances plus fixed hyperparameters of the state-space model."""

    sigma2_E: float
    sigma2_U: float
    sigma2_V: float
    d: int
    sigma2_U0: float = 1.0
    sigma2_V0: float = 1.0

    def __post_init__(self):
        for name in ("sigma2_E", "sigma2_U", "sigma2_V", "sigma2_U0", "sigma2_V0"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be strictly positive, got {v}")
        if self.d < 1:
            raise ValueError("latent dimension must be >= 1")

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for name in ("sigma2_E", "sigma2_U", "sigma2_V", "d", "sigma2_U0", "sigma2_V0"):
                fh.write(f"{name}={getattr(self, name)!r}\n")

    @classmethod
    def load(cls, path) -> "ModelParams":
        vals: dict[str, float] = {}
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                key, _, raw = line.partition("=")
                vals[key.strip()] = float(raw.strip())
        return cls(
            sigma2_E=vals["sigma2_E"],
            sigma2_U=vals["sigma2_U"],
            sigma2_V=vals["sigma2_V"],
            d=int(vals["d"]),
            sigma2_U0=vals.get("sigma2_U0", 1.0),
            sigma2_V0=vals.get("sigma2_V0", 1.0),
        )


@dataclass
class LatentState:
    """Gaussian posterior of one entity's topic vector at its last event time."""

    mean: np.ndarray
    cov: np.ndarray
    last_event_time: float

    def copy(self) -> "LatentState":
        return LatentState(self.mean.copy(), self.cov.copy(), self.last_event_time)


def check_cov(cov: np.ndarray, *, atol_sym: float = 1e-10, atol_psd: float = 1e-9) -> None:
    """Raise if a covariance is visibly asymmetric or indefinite."""
    asym = float(np.max(np.abs(cov - cov.T)))
    if asym >= atol_sym:
        raise ValueError(f"covariance asymmetry {asym:g}")
    w = np.linalg.eigvalsh(0.5 * (cov + cov.T))
    if w.min() < -atol_psd:
        raise ValueError(f"covariance not PSD, min eigenvalue {w.min():g}")


@dataclass
class ValidationReport:
    n_events: int = 0
    missing_birth: list[tuple[int, str]] = field(default_factory=list)
    time_regressions: list[int] = field(default_factory=list)
    bad_levels: list[int] = field(default_factory=list)
    duplicate_births: list[tuple[int, str]] = field(default_factory=list)

    @property
    def n_violations(self) -> int:
        return (len(self.missing_birth) + len(self.time_regressions)
                + len(self.bad_levels) + len(self.duplicate_births))

    @property
    def ok(self) -> bool:
        return self.n_violations == 0


def validate_log(events: Sequence[Event], K: int | None = None) -> ValidationReport:
    """Report ordering, birth and level violations; never raises."""
    rep = ValidationReport(n_events=len(events))
    born_users: set[str] = set()
    born_items: set[str] = set()
    prev_t = -math.inf
    for idx, ev in enumerate(events):
        if ev.time < prev_t:
            rep.time_regressions.append(idx)
        prev_t = max(prev_t, ev.time)
        if ev.kind == USER_BIRTH:
            if ev.user in born_users:
                rep.duplicate_births.append((idx, ev.user))
            born_users.add(ev.user)
        elif ev.kind == ITEM_BIRTH:
            if ev.item in born_items:
                rep.duplicate_births.append((idx, ev.item))
            born_items.add(ev.item)
        else:
            if ev.user not in born_users:
                rep.missing_birth.append((idx, ev.user))
            if ev.item not in born_items:
                rep.missing_birth.append((idx, ev.item))
            if ev.level < 1 or (K is not None and ev.level > K):
                rep.bad_levels.append(idx)
    return rep


def auto_insert_births(events: Sequence[Event]) -> list[Event]:
    """Insert a birth at each entity's first appearance; idempotent.

    Input must be time-sorted. Births are emitted before same-time ratings.
    """
    born_users: set[str] = set()
    born_items: set[str] = set()
    out: list[Event] = []
    i = 0
    n = len(events)
    while i < n:
        t = events[i].time
        j = i
        while j < n and events[j].time == t:
            j += 1
        batch = events[i:j]
        births: list[Event] = []
        rest: list[Event] = []
        for ev in batch:
            if ev.kind == USER_BIRTH:
                born_users.add(ev.user)
                births.append(ev)
            elif ev.kind == ITEM_BIRTH:
                born_items.add(ev.item)
                births.append(ev)
            else:
                if ev.user not in born_users:
                    births.append(Event(t, USER_BIRTH, user=ev.user))
                    born_users.add(ev.user)
                if ev.item not in born_items:
                    births.append(Event(t, ITEM_BIRTH, item=ev.item))
                    born_items.add(ev.item)
                rest.append(ev)
        out.extend(births)
        out.extend(rest)
        i = j
    return out


def iter_batches(events: Sequence[Event]) -> Iterator[list[Event]]:
    """Group a sorted log into same-timestamp batches."""
    i = 0
    n = len(events)
    while i < n:
        t = events[i].time
        j = i
        while j < n and events[j].time == t:
            j += 1
        yield list(events[i:j])
        i = j


def write_event_csv(events: Iterable[Event], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "kind", "user", "item", "level"])
        for ev in events:
            w.writerow([
                repr(float(ev.time)),
                ev.kind,
                ev.user or "",
                ev.item or "",
                "" if ev.level is None else ev.level,
            ])


def read_event_csv(path) -> list[Event]:
    events: list[Event] = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header[:5] != ["time", "kind", "user", "item", "level"]:
            raise ValueError(f"unexpected event CSV header: {header}")
        for row in r:
            t, kind, user, item, level = row[:5]
            events.append(Event(
                time=float(t),
                kind=kind,
                user=user or None,
                item=item or None,
                level=int(level) if level else None,
            ))
    return events
