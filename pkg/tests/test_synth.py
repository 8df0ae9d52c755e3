"""synth: corpus generation determinism, anomaly planting, ground truth."""
import itertools

import numpy as np
import pytest

from rxsentinel import synth
from rxsentinel.errors import ConfigError
from rxsentinel.orders import (hosp_record, order_record, reconstruct_profiles)


def small_cfg(**kw):
    defaults = dict(seed=11, years=(2014, 2016), vocab_size=200,
                    hospitalizations_per_year=60)
    defaults.update(kw)
    return synth.SynthConfig(**defaults)


def log_bytes(hosps, events):
    return "\n".join([hosp_record(h) for h in hosps] + [order_record(e) for e in events])


def test_generation_is_deterministic():
    a = synth.generate_corpus(small_cfg())
    b = synth.generate_corpus(small_cfg())
    assert log_bytes(a[0], a[1]) == log_bytes(b[0], b[1])
    assert a[2].order_flags == b[2].order_flags


def test_zero_anomaly_rate_yields_all_typical():
    _, events, truth = synth.generate_corpus(small_cfg(anomaly_rate=0.0))
    assert truth.planted_count() == 0
    assert len(truth.order_flags) == len(events)


def test_vocab_too_small_raises():
    with pytest.raises(ConfigError):
        synth.generate_corpus(small_cfg(vocab_size=30))  # pools can't hold templates


def mean_pairwise_jaccard(profiles, limit=300):
    sets = [p.drugs for p in profiles[:limit]]
    sims = [len(a & b) / len(a | b) for a, b in itertools.combinations(sets, 2)]
    return float(np.mean(sims))


def test_adherent_department_has_more_similar_profiles():
    cfg = small_cfg(
        departments=[
            synth.DepartmentMix(synth.Department.NICU, 2, 0.95, 0.2),
            synth.DepartmentMix(synth.Department.ONCOLOGY, 2, 0.60, 0.2),
        ],
        hospitalizations_per_year=80,
    )
    hosps, events, _ = synth.generate_corpus(cfg)
    profiles = reconstruct_profiles(events, hosps)
    nicu = [p for p in profiles if p.department == synth.Department.NICU]
    onc = [p for p in profiles if p.department == synth.Department.ONCOLOGY]
    assert mean_pairwise_jaccard(nicu) > mean_pairwise_jaccard(onc)


def test_default_profiles_loosely_mirror_target_size():
    hosps, events, _ = synth.generate_corpus(small_cfg(hospitalizations_per_year=100))
    profiles = reconstruct_profiles(events, hosps)
    sizes = [len(p.drugs) for p in profiles]
    assert 7.0 <= np.mean(sizes) <= 12.0


def test_inject_rate_binomial_count():
    # ~10k orders at rate 0.1: planted count within 1000 +/- 60 (2 sigma)
    cfg = small_cfg(years=(2010, 2017), hospitalizations_per_year=130)
    hosps, events, _ = synth.generate_corpus(cfg)
    assert 9000 <= len(events) <= 12000
    _, truth = synth.inject_anomalies(hosps, events, 0.1, seed=99)
    expected = 0.1 * len(events)
    sigma = np.sqrt(len(events) * 0.1 * 0.9)
    assert abs(truth.planted_count() - expected) <= 2.5 * sigma


def test_inject_tiny_rate_can_select_nothing():
    cfg = small_cfg(years=(2014, 2014), hospitalizations_per_year=2)
    hosps, events, _ = synth.generate_corpus(cfg)
    injected, truth = synth.inject_anomalies(hosps, events, 0.001, seed=1)
    if truth.planted_count() == 0:
        assert [order_record(e) for e in injected] == [order_record(e) for e in events]


def test_inject_leaves_original_log_unmodified():
    hosps, events, _ = synth.generate_corpus(small_cfg())
    before = [order_record(e) for e in events]
    synth.inject_anomalies(hosps, events, 0.3, seed=5)
    assert [order_record(e) for e in events] == before


def test_foreign_substitution_never_from_own_department_pool():
    cfg = small_cfg()
    hosps, events, _ = synth.generate_corpus(cfg)
    pools = synth.department_drug_pools(hosps, events)
    dept_of = {h.id: h.department for h in hosps}
    injected, truth = synth.inject_anomalies(hosps, events, 0.2, seed=3)
    counts: dict[str, int] = {}
    for e in events:
        counts[e.drug] = counts.get(e.drug, 0) + 1
    ranked = sorted(counts, key=lambda d: (counts[d], d))
    rare = set(ranked[: max(1, len(ranked) // 10)])
    for orig, new, flag in zip(events, injected, truth.order_flags):
        if not flag:
            assert orig.drug == new.drug
            continue
        own = pools[dept_of[new.hospitalization_id]]
        # either mode (a): foreign to the department, or mode (b): globally rare
        assert new.drug not in own or new.drug in rare


def test_profile_flags_are_or_of_active_orders():
    cfg = small_cfg(anomaly_rate=0.15)
    hosps, events, truth = synth.generate_corpus(cfg)
    profiles = reconstruct_profiles(events, hosps)
    flags = synth.profile_flags(profiles, hosps, events, truth)
    spans = {}
    for idx, e in enumerate(events):
        spans.setdefault(e.hospitalization_id, []).append((idx, e))
    for p in profiles[:200]:
        idx_events = spans[p.hospitalization_id]
        last = max(e.end if e.end is not None else e.start for _, e in idx_events)
        expect = any(
            truth.order_flags[i] and e.start <= p.as_of <= (e.end or last)
            for i, e in idx_events
        )
        assert flags[p.profile_id] == expect


def test_acceptance_corpus_shape():
    cfg = synth.acceptance_config()
    hosps, events, truth = synth.generate_corpus(cfg)
    profiles = reconstruct_profiles(events, hosps)
    rate = truth.planted_count() / len(events)
    assert 0.08 <= rate <= 0.12
    assert len(profiles) >= 18000
    flags = synth.profile_flags(profiles, hosps, events, truth)
    prevalence = np.mean([flags[p.profile_id] for p in profiles])
    assert prevalence <= 0.25
