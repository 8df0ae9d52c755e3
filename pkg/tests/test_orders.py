"""orders: ingestion, profile reconstruction, vocabulary."""
import io
import json
from datetime import date

import numpy as np
import pytest

from rxsentinel.errors import EmptyCorpusError, ParseError, ReferentialError
from rxsentinel.orders import (Department, Hospitalization, OrderEvent, Profile,
                               build_vocabulary, encode_profiles, hospitalization_year,
                               ingest_orders, profile_record, read_profiles,
                               reconstruct_profiles)

H1 = '{"kind":"hosp","id":"h1","patient_id":"p1","department":"nicu","admission_date":"2015-03-01"}'
O1 = '{"kind":"order","hospitalization_id":"h1","drug":"A","start":"2015-03-01","end":"2015-03-03"}'
O2 = '{"kind":"order","hospitalization_id":"h1","drug":"B","start":"2015-03-02","end":"2015-03-03"}'


def hosp(hid="h1", patient="p1", dept=Department.NICU, admission="2015-03-01"):
    return Hospitalization(hid, patient, dept, date.fromisoformat(admission))


def test_ingest_empty_stream():
    hosps, events = ingest_orders(io.StringIO(""))
    assert hosps == [] and events == []


def test_ingest_basic():
    hosps, events = ingest_orders(io.StringIO("\n".join([H1, O1, O2]) + "\n"))
    assert len(hosps) == 1 and len(events) == 2
    assert events[0].drug == "A" and events[1].drug == "B"


def test_ingest_sorts_events_by_hosp_then_start():
    h2 = H1.replace('"h1"', '"h0"').replace('"p1"', '"p0"')
    lines = [H1, h2, O2, O1,
             '{"kind":"order","hospitalization_id":"h0","drug":"Z","start":"2015-03-05","end":null}']
    _, events = ingest_orders(io.StringIO("\n".join(lines)))
    keys = [(e.hospitalization_id, e.start) for e in events]
    assert keys == sorted(keys)


def test_ingest_dangling_reference():
    with pytest.raises(ReferentialError):
        ingest_orders(io.StringIO(O1))


def test_ingest_parse_error_carries_line_number():
    with pytest.raises(ParseError) as err:
        ingest_orders(io.StringIO(H1 + "\n{broken\n"))
    assert err.value.line_no == 2


def test_ingest_rejects_end_before_start():
    bad = O1.replace('"end":"2015-03-03"', '"end":"2015-02-01"')
    with pytest.raises(ParseError):
        ingest_orders(io.StringIO(H1 + "\n" + bad))


def test_reconstruct_daily_snapshots_with_duplicate_suppression():
    # drug A active days 1-3, drug B days 2-3: {A}@d1, {A,B}@d2, day 3 suppressed
    h = hosp()
    events = [
        OrderEvent("h1", "A", date(2015, 3, 1), date(2015, 3, 3)),
        OrderEvent("h1", "B", date(2015, 3, 2), date(2015, 3, 3)),
    ]
    profiles = reconstruct_profiles(events, [h])
    assert [(p.as_of.day, sorted(p.drugs)) for p in profiles] == [
        (1, ["A"]), (2, ["A", "B"])]
    assert all(p.department == Department.NICU and p.patient_id == "p1" for p in profiles)


def test_reconstruct_single_one_day_order():
    profiles = reconstruct_profiles(
        [OrderEvent("h1", "A", date(2015, 3, 1), date(2015, 3, 1))], [hosp()])
    assert len(profiles) == 1 and profiles[0].drugs == frozenset({"A"})


def test_reconstruct_missing_end_runs_to_last_event_day():
    events = [
        OrderEvent("h1", "A", date(2015, 3, 1), None),
        OrderEvent("h1", "B", date(2015, 3, 2), date(2015, 3, 4)),
    ]
    profiles = reconstruct_profiles(events, [hosp()])
    # A stays active through 03-04 (last event day)
    assert profiles[-1].as_of == date(2015, 3, 2)
    day4 = [p for p in profiles if p.as_of == date(2015, 3, 4)]
    assert not day4  # {A,B} unchanged through day 4, so no new profile after day 2


def test_reconstruct_gap_reemits_after_empty_day():
    events = [
        OrderEvent("h1", "A", date(2015, 3, 1), date(2015, 3, 1)),
        OrderEvent("h1", "A", date(2015, 3, 3), date(2015, 3, 3)),
    ]
    profiles = reconstruct_profiles(events, [hosp()])
    assert [p.as_of.day for p in profiles] == [1, 3]
    assert profiles[0].drugs == profiles[1].drugs == frozenset({"A"})


def test_reconstruct_no_cross_hospitalization_mixing():
    hosps = [hosp("h1", "p1"), hosp("h2", "p2", Department.ONCOLOGY)]
    events = [
        OrderEvent("h1", "A", date(2015, 3, 1), date(2015, 3, 2)),
        OrderEvent("h2", "A", date(2015, 3, 1), date(2015, 3, 2)),
    ]
    profiles = reconstruct_profiles(events, hosps)
    assert len(profiles) == 2
    assert {p.hospitalization_id for p in profiles} == {"h1", "h2"}


def test_reconstruct_deterministic_and_consecutive_sets_differ():
    rng = np.random.default_rng(5)
    hosps, events = [], []
    for i in range(25):
        hid = f"h{i:02d}"
        hosps.append(hosp(hid, f"p{i}"))
        for _ in range(rng.integers(1, 8)):
            start = date(2015, 3, 1 + int(rng.integers(0, 10)))
            events.append(OrderEvent(hid, f"D{rng.integers(0, 12):02d}", start,
                                     start.replace(day=start.day)
                                     if rng.random() < 0.3 else None))
    a = reconstruct_profiles(events, hosps)
    b = reconstruct_profiles(list(events), list(hosps))
    assert [profile_record(p) for p in a] == [profile_record(p) for p in b]
    by_hosp = {}
    for p in a:
        by_hosp.setdefault(p.hospitalization_id, []).append(p)
    for plist in by_hosp.values():
        for prev, cur in zip(plist, plist[1:]):
            assert prev.drugs != cur.drugs


def test_hospitalization_year_attribution():
    h = hosp(admission="2016-12-30")
    assert hospitalization_year(h) == 2016
    # profiles dated into the next year still belong to the admission year
    events = [OrderEvent("h1", "A", date(2016, 12, 30), date(2017, 1, 2))]
    profiles = reconstruct_profiles(events, [h])
    assert profiles[0].as_of == date(2016, 12, 30)
    assert hospitalization_year(h) == 2016
    assert hospitalization_year(hosp(admission="2015-01-01")) == 2015
    h_a = hosp("ha", "p9", admission="2015-06-01")
    h_b = hosp("hb", "p9", admission="2016-06-01")
    assert hospitalization_year(h_a) != hospitalization_year(h_b)


def _profile(drugs, hid="h1", dept=Department.NICU):
    return Profile(hid, dept, date(2015, 3, 1), frozenset(drugs))


def test_vocabulary_lexicographic_and_roundtrip():
    vocab = build_vocabulary([_profile({"b", "a"})])
    assert vocab.tokens == ["a", "b"]
    assert vocab.index_of("a") == 0 and vocab.index_of("b") == 1
    for i in range(len(vocab)):
        assert vocab.index_of(vocab.drug_at(i)) == i


def test_vocabulary_dedupes_and_counts():
    profs = [_profile({"a", "b"}), _profile({"b", "c"}), _profile({"d", "e"})]
    vocab = build_vocabulary(profs)
    assert len(vocab) == 5


def test_vocabulary_empty_corpus_error():
    with pytest.raises(EmptyCorpusError):
        build_vocabulary([])


def test_multi_hot_and_oov_tally():
    vocab = build_vocabulary([_profile({"a", "b", "c"})])
    vec, oov = vocab.multi_hot({"a", "c"})
    assert vec.tolist() == [1.0, 0.0, 1.0] and oov == 0
    vec, oov = vocab.multi_hot({"zz", "yy"})
    assert vec.sum() == 0 and oov == 2
    x, total = encode_profiles([_profile({"a", "zz"}), _profile({"qq"})], vocab)
    assert total == 2 and x.shape == (2, 3)


def test_profile_record_sorted_drugs_and_roundtrip():
    p = Profile("h1", Department.OBGYN, date(2015, 3, 1), frozenset({"z", "a", "m"}),
                patient_id="p1", label="atypical")
    rec = profile_record(p)
    assert json.loads(rec)["drugs"] == ["a", "m", "z"]
    back = read_profiles([rec])[0]
    assert back.drugs == p.drugs and back.label == "atypical" and back.patient_id == "p1"
    assert back.profile_id == "h1@2015-03-01"
