"""Seeded synthetic hospital order logs with planted atypical orders.

Each hospitalization draws a department, picks one of that department's
protocol templates (a fixed drug set), keeps template drugs with the
department's adherence probability, and adds Poisson-distributed extras from
a department-specific long-tail distribution. Anomalies are planted by
substituting order drugs either with a foreign department's drug or with a
globally rare one.

Randomness comes from numpy's PCG64 so a (config, seed) pair always yields
the same corpus; golden logs live under tests/golden.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from datetime import date, timedelta

import numpy as np

from .errors import ConfigError
from .orders import Department, Hospitalization, OrderEvent, Profile

_EXTRA_WEIGHT_OFFSET = 5.0  # long-tail sharpness for extra-drug draws


@dataclass(frozen=True)
class DepartmentMix:
    department: Department
    protocol_count: int
    adherence: float  # probability a template drug is kept
    extra_rate: float = 0.8  # Poisson mean of long-tail extras per stay


@dataclass
class SynthConfig:
    seed: int
    years: tuple[int, int] = (2009, 2018)  # inclusive span
    vocab_size: int = 300
    hospitalizations_per_year: int = 120
    departments: list[DepartmentMix] = field(default_factory=lambda: list(DEFAULT_MIX))
    anomaly_rate: float = 0.0
    template_size: tuple[int, int] = (5, 18)
    order_duration: tuple[int, int] = (3, 10)  # days, inclusive
    start_stagger: int = 1  # max order-start offset from admission, days
    # "bundled": template orders stop together at discharge (large concurrent
    # profiles); "staggered": every order draws its own span (low concurrency)
    span_style: str = "bundled"

    def validate(self) -> None:
        if not (0.0 <= self.anomaly_rate <= 0.5):
            raise ConfigError(f"anomaly_rate must be in [0, 0.5], got {self.anomaly_rate}")
        if self.years[0] > self.years[1]:
            raise ConfigError("years span is inverted")
        if self.vocab_size <= 0 or self.hospitalizations_per_year <= 0:
            raise ConfigError("vocab_size and hospitalizations_per_year must be positive")
        if not self.departments:
            raise ConfigError("at least one department mix required")
        if self.template_size[0] < 1 or self.template_size[0] > self.template_size[1]:
            raise ConfigError("bad template_size range")
        pool = _pool_size(self.vocab_size, len(self.departments))
        if pool < self.template_size[1]:
            raise ConfigError(
                f"vocab_size {self.vocab_size} too small: department pools of {pool} "
                f"drugs cannot hold templates of up to {self.template_size[1]} drugs"
            )
        if self.span_style not in ("bundled", "staggered"):
            raise ConfigError(f"unknown span_style {self.span_style!r}")


DEFAULT_MIX = (
    DepartmentMix(Department.NICU, 4, 0.95, 0.3),
    DepartmentMix(Department.OBGYN, 4, 0.93, 0.3),
    DepartmentMix(Department.NURSERY, 3, 0.90, 0.3),
    DepartmentMix(Department.PICU, 4, 0.88, 0.5),
    DepartmentMix(Department.SPECIALIZED_PED, 5, 0.80, 0.8),
    DepartmentMix(Department.SURGERY, 5, 0.75, 0.8),
    DepartmentMix(Department.GENERAL_PED, 7, 0.65, 1.2),
    DepartmentMix(Department.ONCOLOGY, 7, 0.60, 1.2),
)


@dataclass
class GroundTruth:
    """Per-order planted flags, aligned with the (hospitalization_id, start)-sorted log."""

    order_flags: list[bool]

    def planted_count(self) -> int:
        return sum(self.order_flags)


def _pool_size(vocab_size: int, n_departments: int) -> int:
    # each department gets a disjoint slice; the remainder is a shared rare tail
    return vocab_size // (n_departments + 2)


def _department_pools(cfg: SynthConfig) -> tuple[dict[Department, list[str]], list[str]]:
    universe = [f"D{i:04d}" for i in range(cfg.vocab_size)]
    size = _pool_size(cfg.vocab_size, len(cfg.departments))
    pools = {}
    for i, mix in enumerate(cfg.departments):
        pools[mix.department] = universe[i * size : (i + 1) * size]
    tail = universe[len(cfg.departments) * size :]
    return pools, tail


def generate_corpus(
    cfg: SynthConfig,
) -> tuple[list[Hospitalization], list[OrderEvent], GroundTruth]:
    """Generate a full order log plus planted-anomaly ground truth."""
    cfg.validate()
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    pools, tail = _department_pools(cfg)

    templates: dict[Department, list[list[str]]] = {}
    extra_candidates: dict[Department, list[str]] = {}
    for mix in cfg.departments:
        pool = pools[mix.department]
        tpls = []
        for _ in range(mix.protocol_count):
            size = int(rng.integers(cfg.template_size[0], cfg.template_size[1] + 1))
            tpls.append([pool[j] for j in rng.choice(len(pool), size=size, replace=False)])
        templates[mix.department] = tpls
        shuffled_tail = [tail[j] for j in rng.permutation(len(tail))]
        extra_candidates[mix.department] = pool + shuffled_tail

    weights_cache: dict[Department, np.ndarray] = {}
    for mix in cfg.departments:
        n = len(extra_candidates[mix.department])
        w = 1.0 / (np.arange(n) + _EXTRA_WEIGHT_OFFSET)
        weights_cache[mix.department] = w / w.sum()

    hosps: list[Hospitalization] = []
    events: list[OrderEvent] = []
    for year in range(cfg.years[0], cfg.years[1] + 1):
        for i in range(cfg.hospitalizations_per_year):
            mix = cfg.departments[int(rng.integers(len(cfg.departments)))]
            hid = f"H{year}-{i:05d}"
            admission = date(year, 1, 1) + timedelta(days=int(rng.integers(0, 365)))
            hosps.append(
                Hospitalization(
                    id=hid,
                    patient_id=f"P{year}-{i:05d}",
                    department=mix.department,
                    admission_date=admission,
                )
            )
            tpl = templates[mix.department][int(rng.integers(len(templates[mix.department])))]
            kept = [d for d in tpl if rng.random() < mix.adherence]
            if not kept:
                kept = [tpl[int(rng.integers(len(tpl)))]]
            extras: list[str] = []
            n_extra = int(rng.poisson(mix.extra_rate))
            cands = extra_candidates[mix.department]
            for _ in range(n_extra):
                pick = cands[int(rng.choice(len(cands), p=weights_cache[mix.department]))]
                if pick not in kept and pick not in extras:
                    extras.append(pick)
            if cfg.span_style == "bundled":
                # the protocol bundle starts at admission and stops at discharge;
                # only extras have idiosyncratic spans
                stay = int(rng.integers(cfg.order_duration[0], cfg.order_duration[1] + 1))
                stay_end = admission + timedelta(days=stay - 1)
                for drug in kept:
                    events.append(OrderEvent(hid, drug, admission, stay_end))
                for drug in extras:
                    start = admission + timedelta(
                        days=int(rng.integers(0, cfg.start_stagger + 3)))
                    dur = int(rng.integers(2, 6))
                    events.append(OrderEvent(hid, drug, start,
                                             start + timedelta(days=dur - 1)))
            else:
                for drug in kept + extras:
                    start = admission + timedelta(
                        days=int(rng.integers(0, cfg.start_stagger + 1)))
                    dur = int(rng.integers(cfg.order_duration[0],
                                           cfg.order_duration[1] + 1))
                    events.append(OrderEvent(hid, drug, start,
                                             start + timedelta(days=dur - 1)))

    # match the ingest sort so ground-truth indices survive a write/read round trip
    events.sort(key=lambda e: (e.hospitalization_id, e.start))

    if cfg.anomaly_rate > 0.0:
        events, truth = inject_anomalies(hosps, events, cfg.anomaly_rate, cfg.seed + 1)
    else:
        truth = GroundTruth(order_flags=[False] * len(events))
    return hosps, events, truth


def department_drug_pools(
    hosps: list[Hospitalization], events: list[OrderEvent]
) -> dict[Department, set[str]]:
    """Observed drug sets per department, derived from the log itself."""
    dept_of = {h.id: h.department for h in hosps}
    pools: dict[Department, set[str]] = {}
    for e in events:
        pools.setdefault(dept_of[e.hospitalization_id], set()).add(e.drug)
    return pools


def inject_anomalies(
    hosps: list[Hospitalization],
    events: list[OrderEvent],
    rate: float,
    seed: int,
) -> tuple[list[OrderEvent], GroundTruth]:
    """Plant atypical orders by drug substitution; the input log is untouched.

    Each order is independently selected with probability `rate`; a selected
    order's drug is replaced either by a drug from a different department's
    observed pool (never one from its own department) or by a globally rare
    drug (rarest decile by occurrence count).
    """
    if not (0.0 < rate <= 0.5):
        raise ConfigError(f"anomaly rate must be in (0, 0.5], got {rate}")
    rng = np.random.Generator(np.random.PCG64(seed))
    dept_of = {h.id: h.department for h in hosps}
    pools = department_drug_pools(hosps, events)
    departments = sorted(pools, key=lambda d: d.value)

    counts: dict[str, int] = {}
    for e in events:
        counts[e.drug] = counts.get(e.drug, 0) + 1
    ranked = sorted(counts, key=lambda d: (counts[d], d))
    rare_pool = ranked[: max(1, len(ranked) // 10)]

    foreign_cache: dict[Department, list[str]] = {}

    def foreign_pool(dept: Department) -> list[str]:
        if dept not in foreign_cache:
            own = pools.get(dept, set())
            merged: set[str] = set()
            for other in departments:
                if other != dept:
                    merged |= pools[other]
            foreign_cache[dept] = sorted(merged - own)
        return foreign_cache[dept]

    out: list[OrderEvent] = []
    flags: list[bool] = []
    for e in events:
        if rng.random() >= rate:
            out.append(e)
            flags.append(False)
            continue
        dept = dept_of[e.hospitalization_id]
        use_foreign = rng.random() < 0.5
        candidates = foreign_pool(dept) if use_foreign else rare_pool
        candidates = [d for d in candidates if d != e.drug]
        if not candidates:
            candidates = [d for d in rare_pool if d != e.drug]
        if not candidates:
            out.append(e)
            flags.append(False)
            continue
        new_drug = candidates[int(rng.integers(len(candidates)))]
        out.append(OrderEvent(e.hospitalization_id, new_drug, e.start, e.end))
        flags.append(True)
    return out, GroundTruth(order_flags=flags)


def profile_flags(
    profiles: list[Profile],
    hosps: list[Hospitalization],
    events: list[OrderEvent],
    truth: GroundTruth,
) -> dict[str, bool]:
    """Derive per-profile ground truth: atypical iff any active order is planted."""
    grouped: dict[str, list[tuple[int, OrderEvent]]] = {}
    for idx, e in enumerate(events):
        grouped.setdefault(e.hospitalization_id, []).append((idx, e))
    spans: dict[str, list[tuple[date, date, bool]]] = {}
    for hid, idx_events in grouped.items():
        last_day = max(e.end if e.end is not None else e.start for _, e in idx_events)
        spans[hid] = [
            (e.start, e.end if e.end is not None else last_day, truth.order_flags[idx])
            for idx, e in idx_events
        ]
    out: dict[str, bool] = {}
    for p in profiles:
        flagged = any(
            s <= p.as_of <= e and planted for s, e, planted in spans.get(p.hospitalization_id, [])
        )
        out[p.profile_id] = flagged
    return out


def acceptance_config(seed: int = 424242, anomaly_rate: float = 0.10) -> SynthConfig:
    """Fixed-seed desk-scale corpus used by the end-to-end detection checks.

    Small templates and staggered short spans keep concurrent orders per
    profile low (~2), so the OR-derived profile prevalence stays near the
    order-level anomaly rate instead of saturating.
    """
    return SynthConfig(
        seed=seed,
        years=(2009, 2018),
        vocab_size=600,
        hospitalizations_per_year=520,
        departments=[
            DepartmentMix(Department.NICU, 3, 0.92, 0.15),
            DepartmentMix(Department.OBGYN, 3, 0.92, 0.15),
            DepartmentMix(Department.GENERAL_PED, 8, 0.60, 0.45),
            DepartmentMix(Department.ONCOLOGY, 8, 0.60, 0.45),
        ],
        anomaly_rate=anomaly_rate,
        template_size=(3, 5),
        order_duration=(3, 5),
        start_stagger=6,
        span_style="staggered",
    )
