"""Order-log ingestion, pharmacological-profile reconstruction, drug vocabulary.

A pharmacological profile is the set of drugs concurrently active for one
hospitalization on one calendar day. Profiles are snapshotted daily and a
day is emitted only when its drug set is non-empty and differs from the
previous day's set (consecutive duplicates suppressed).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from datetime import date, timedelta
from enum import Enum
from typing import Iterable, Optional

import numpy as np

from .errors import EmptyCorpusError, ParseError, ReferentialError


class Department(str, Enum):
    OBGYN = "obgyn"
    GENERAL_PED = "general_ped"
    SURGERY = "surgery"
    ONCOLOGY = "oncology"
    SPECIALIZED_PED = "specialized_ped"
    NICU = "nicu"
    NURSERY = "nursery"
    PICU = "picu"


def _check_drug(code: str) -> str:
    if not isinstance(code, str) or not code or any(c.isspace() for c in code):
        raise ValueError(f"invalid drug code: {code!r}")
    return code


@dataclass(frozen=True)
class Hospitalization:
    id: str
    patient_id: str
    department: Department
    admission_date: date


@dataclass(frozen=True)
class OrderEvent:
    hospitalization_id: str
    drug: str
    start: date
    end: Optional[date] = None  # None = active until the hospitalization's last event day

    def __post_init__(self):
        _check_drug(self.drug)
        if self.end is not None and self.end < self.start:
            raise ValueError(f"order end {self.end} precedes start {self.start}")


@dataclass
class Profile:
    hospitalization_id: str
    department: Department
    as_of: date
    drugs: frozenset[str]
    patient_id: Optional[str] = None
    label: Optional[str] = None  # "typical" | "atypical" when known

    @property
    def profile_id(self) -> str:
        return f"{self.hospitalization_id}@{self.as_of.isoformat()}"

    def sorted_drugs(self) -> list[str]:
        return sorted(self.drugs)


def hospitalization_year(h: Hospitalization) -> int:
    """Year a hospitalization is attributed to: the year it began.

    Every profile of the hospitalization belongs to this year, even when the
    stay runs past December 31st. Keeps temporal splits leak-free.
    """
    return h.admission_date.year


# ---------------------------------------------------------------------------
# order-log format: UTF-8 JSON lines, discriminated by "kind"


def _parse_date(raw, line_no, field_name):
    try:
        return date.fromisoformat(raw)
    except (TypeError, ValueError):
        raise ParseError(line_no, f"bad {field_name} date: {raw!r}") from None


def ingest_orders(lines: Iterable[str]) -> tuple[list[Hospitalization], list[OrderEvent]]:
    """Parse an order-log stream into hospitalizations and order events.

    Raises ParseError (with the offending line number) on malformed records
    and ReferentialError when an order points at an undeclared
    hospitalization. Events come back sorted by (hospitalization_id, start).
    """
    hosps: list[Hospitalization] = []
    seen_ids: set[str] = set()
    raw_orders: list[tuple[int, dict]] = []
    for line_no, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(line_no, f"invalid JSON ({exc.msg})") from None
        if not isinstance(rec, dict):
            raise ParseError(line_no, "record is not an object")
        kind = rec.get("kind")
        if kind == "hosp":
            try:
                h = Hospitalization(
                    id=str(rec["id"]),
                    patient_id=str(rec["patient_id"]),
                    department=Department(rec["department"]),
                    admission_date=_parse_date(rec["admission_date"], line_no, "admission"),
                )
            except KeyError as exc:
                raise ParseError(line_no, f"missing field {exc.args[0]!r}") from None
            except ValueError as exc:
                raise ParseError(line_no, str(exc)) from None
            if h.id in seen_ids:
                raise ParseError(line_no, f"duplicate hospitalization id {h.id!r}")
            seen_ids.add(h.id)
            hosps.append(h)
        elif kind == "order":
            raw_orders.append((line_no, rec))
        else:
            raise ParseError(line_no, f"unknown record kind: {kind!r}")

    events: list[OrderEvent] = []
    for line_no, rec in raw_orders:
        try:
            hid = str(rec["hospitalization_id"])
            end_raw = rec.get("end")
            ev = OrderEvent(
                hospitalization_id=hid,
                drug=rec["drug"],
                start=_parse_date(rec["start"], line_no, "start"),
                end=None if end_raw is None else _parse_date(end_raw, line_no, "end"),
            )
        except KeyError as exc:
            raise ParseError(line_no, f"missing field {exc.args[0]!r}") from None
        except ValueError as exc:
            raise ParseError(line_no, str(exc)) from None
        if ev.hospitalization_id not in seen_ids:
            raise ReferentialError(
                f"line {line_no}: order references unknown hospitalization "
                f"{ev.hospitalization_id!r}"
            )
        events.append(ev)

    events.sort(key=lambda e: (e.hospitalization_id, e.start))
    return hosps, events


def reconstruct_profiles(
    events: list[OrderEvent], hosps: list[Hospitalization]
) -> list[Profile]:
    """Rebuild daily drug-set snapshots from the order log.

    For each hospitalization, every calendar day from its first order start to
    its last order end is inspected; the active set is the drugs whose
    [start, end] span covers the day (a missing end runs to the last event day
    of that hospitalization). A profile is emitted when the set is non-empty
    and differs from the previous day's set.
    """
    by_hosp: dict[str, Hospitalization] = {h.id: h for h in hosps}
    grouped: dict[str, list[OrderEvent]] = {}
    for ev in events:
        if ev.hospitalization_id not in by_hosp:
            raise ReferentialError(
                f"order references unknown hospitalization {ev.hospitalization_id!r}"
            )
        grouped.setdefault(ev.hospitalization_id, []).append(ev)

    profiles: list[Profile] = []
    for hid in sorted(grouped):
        h = by_hosp[hid]
        evs = grouped[hid]
        first_day = min(e.start for e in evs)
        last_day = max(e.end if e.end is not None else e.start for e in evs)
        spans = [(e.drug, e.start, e.end if e.end is not None else last_day) for e in evs]
        prev: frozenset[str] = frozenset()
        day = first_day
        while day <= last_day:
            active = frozenset(d for d, s, e in spans if s <= day <= e)
            if active and active != prev:
                profiles.append(
                    Profile(
                        hospitalization_id=hid,
                        department=h.department,
                        as_of=day,
                        drugs=active,
                        patient_id=h.patient_id,
                    )
                )
            prev = active
            day += timedelta(days=1)
    return profiles


# ---------------------------------------------------------------------------
# vocabulary


class Vocabulary:
    """Ordered bijection between drug codes and dense indices (lexicographic)."""

    def __init__(self, tokens: Iterable[str]):
        self.tokens: list[str] = sorted(set(_check_drug(t) for t in tokens))
        if not self.tokens:
            raise EmptyCorpusError("vocabulary built from zero drugs")
        self._index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, code: str) -> bool:
        return code in self._index

    def index_of(self, code: str) -> int:
        return self._index[code]

    def drug_at(self, i: int) -> str:
        return self.tokens[i]

    def digest(self) -> str:
        h = hashlib.sha256()
        for t in self.tokens:
            h.update(t.encode("utf-8"))
            h.update(b"\x00")
        return h.hexdigest()

    def multi_hot(self, drugs: Iterable[str]) -> tuple[np.ndarray, int]:
        """Encode a drug set as a {0,1} vector; returns (vector, oov_count).

        Out-of-vocabulary drugs are dropped from the encoding and tallied,
        never silently ignored: new drugs show up between retrains.
        """
        vec = np.zeros(len(self.tokens), dtype=np.float64)
        oov = 0
        for d in drugs:
            i = self._index.get(d)
            if i is None:
                oov += 1
            else:
                vec[i] = 1.0
        return vec, oov


def build_vocabulary(profiles: list[Profile]) -> Vocabulary:
    if not profiles:
        raise EmptyCorpusError("cannot build a vocabulary from zero profiles")
    tokens: set[str] = set()
    for p in profiles:
        tokens.update(p.drugs)
    return Vocabulary(tokens)


def encode_profiles(profiles: list[Profile], vocab: Vocabulary) -> tuple[np.ndarray, int]:
    """Stack multi-hot encodings row per profile; returns (matrix, total_oov)."""
    x = np.zeros((len(profiles), len(vocab)), dtype=np.float64)
    total_oov = 0
    for i, p in enumerate(profiles):
        row, oov = vocab.multi_hot(p.drugs)
        x[i] = row
        total_oov += oov
    return x, total_oov


# ---------------------------------------------------------------------------
# serialization (JSON lines, stable key order for golden comparisons)


def hosp_record(h: Hospitalization) -> str:
    return json.dumps(
        {
            "kind": "hosp",
            "id": h.id,
            "patient_id": h.patient_id,
            "department": h.department.value,
            "admission_date": h.admission_date.isoformat(),
        },
        separators=(",", ":"),
    )


def order_record(e: OrderEvent) -> str:
    return json.dumps(
        {
            "kind": "order",
            "hospitalization_id": e.hospitalization_id,
            "drug": e.drug,
            "start": e.start.isoformat(),
            "end": None if e.end is None else e.end.isoformat(),
        },
        separators=(",", ":"),
    )


def profile_record(p: Profile) -> str:
    rec = {
        "kind": "profile",
        "hospitalization_id": p.hospitalization_id,
        "department": p.department.value,
        "as_of": p.as_of.isoformat(),
        "drugs": p.sorted_drugs(),
    }
    if p.patient_id is not None:
        rec["patient_id"] = p.patient_id
    if p.label is not None:
        rec["label"] = p.label
    return json.dumps(rec, separators=(",", ":"))


def write_order_log(path, hosps: list[Hospitalization], events: list[OrderEvent]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for h in hosps:
            fh.write(hosp_record(h) + "\n")
        for e in events:
            fh.write(order_record(e) + "\n")


def write_profiles(path, profiles: list[Profile]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in profiles:
            fh.write(profile_record(p) + "\n")


def read_profiles(lines: Iterable[str]) -> list[Profile]:
    profiles = []
    for line_no, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(line_no, f"invalid JSON ({exc.msg})") from None
        if rec.get("kind") != "profile":
            raise ParseError(line_no, f"expected profile record, got kind={rec.get('kind')!r}")
        try:
            profiles.append(
                Profile(
                    hospitalization_id=str(rec["hospitalization_id"]),
                    department=Department(rec["department"]),
                    as_of=_parse_date(rec["as_of"], line_no, "as_of"),
                    drugs=frozenset(rec["drugs"]),
                    patient_id=rec.get("patient_id"),
                    label=rec.get("label"),
                )
            )
        except KeyError as exc:
            raise ParseError(line_no, f"missing field {exc.args[0]!r}") from None
        except ValueError as exc:
            raise ParseError(line_no, str(exc)) from None
    return profiles


def load_order_log(path) -> tuple[list[Hospitalization], list[OrderEvent]]:
    with open(path, "r", encoding="utf-8") as fh:
        return ingest_orders(fh)


def load_profiles(path) -> list[Profile]:
    with open(path, "r", encoding="utf-8") as fh:
        return read_profiles(fh)
