"""HTTP review service implementing the rate-before-reveal study protocol.

Pharmacists rate every order of a queued profile, then the model's prediction
is revealed and an agree/disagree verdict is recorded. The server enforces the
protocol (no prediction before all orders are rated, one evaluation per
patient ever) and keeps an append-only event log from which every aggregate is
recomputable by replay.

The first `calibration_count` profiles per department (queue order) belong to
the calibration phase: their scores feed threshold calibration and they are
excluded from the reported metrics.
"""
from __future__ import annotations

import json
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .artifacts import (Artifact, Scorer, check_thresholds_match, file_digest,
                        load_artifact, unpack_thresholds)
from .errors import ClassificationError, ConfigError
from .orders import Profile, load_profiles
from .thresholds import (ConfusionMatrix, ThresholdSet, calibrate_thresholds,
                         classify_profile, metrics)


class ProtocolError(Exception):
    def __init__(self, code: str, detail: str, status: int = 409):
        super().__init__(detail)
        self.code = code
        self.detail = detail
        self.status = status


@dataclass
class _Aggregates:
    orders: ConfusionMatrix = field(default_factory=ConfusionMatrix)
    profiles_before: ConfusionMatrix = field(default_factory=ConfusionMatrix)
    profiles_after: ConfusionMatrix = field(default_factory=ConfusionMatrix)
    dept_orders: dict = field(default_factory=dict)
    dept_profiles: dict = field(default_factory=dict)
    calibration_profiles: int = 0
    evaluation_profiles: int = 0


class ReviewService:
    """Protocol state machine; the FastAPI app is a thin shell around it."""

    def __init__(self, profiles: list[Profile], scorer: Scorer,
                 thresholds: Optional[ThresholdSet], state_dir,
                 calibration_count: Optional[int] = None):
        self.profiles = list(profiles)
        self.by_id = {p.profile_id: p for p in self.profiles}
        if len(self.by_id) != len(self.profiles):
            raise ConfigError("duplicate profile ids in queue")
        self.scorer = scorer
        self.state_dir = Path(state_dir)
        self.state_dir.mkdir(parents=True, exist_ok=True)
        self.log_path = self.state_dir / "events.jsonl"
        self._lock = threading.Lock()

        rows = scorer.score_profiles(self.profiles)
        self.score_rows = {r.profile_id: r for r in rows}

        # phase assignment: first C queued profiles of each department calibrate
        per_dept_total: dict[str, int] = {}
        for p in self.profiles:
            per_dept_total[p.department.value] = per_dept_total.get(p.department.value, 0) + 1
        self.calibration_quota = {}
        for dept, total in per_dept_total.items():
            if calibration_count is None:
                self.calibration_quota[dept] = math.ceil(total / 3)
            else:
                self.calibration_quota[dept] = calibration_count
        seen: dict[str, int] = {}
        self.phase: dict[str, str] = {}
        for p in self.profiles:
            d = p.department.value
            seen[d] = seen.get(d, 0) + 1
            self.phase[p.profile_id] = (
                "calibration" if seen[d] <= self.calibration_quota[d] else "evaluation"
            )

        if thresholds is None:
            calib = [(p.department.value, self.score_rows[p.profile_id].score)
                     for p in self.profiles if self.phase[p.profile_id] == "calibration"
                     and math.isfinite(self.score_rows[p.profile_id].score)]
            thresholds = calibrate_thresholds(calib) if calib else ThresholdSet({})
        self.thresholds = thresholds

        # protocol state, all derived from the event log
        self.ratings: dict[str, dict[str, str]] = {}
        self.pharmacists: dict[str, str] = {}
        self.revealed: dict[str, dict] = {}
        self.agreements: dict[str, dict] = {}
        self.patient_profile: dict[str, str] = {}
        self.agg = _Aggregates()
        self.seq = 0
        if self.log_path.exists():
            with open(self.log_path, "r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        self._apply(json.loads(line))

    # -- event sourcing ----------------------------------------------------

    def _append(self, event: dict) -> dict:
        event["seq"] = self.seq
        event["ts"] = time.time()
        with open(self.log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, separators=(",", ":")) + "\n")
        self._apply(event)
        return event

    def _patient_key(self, p: Profile) -> str:
        return p.patient_id if p.patient_id is not None else p.hospitalization_id

    def _apply(self, event: dict) -> None:
        kind = event["event"]
        pid = event["profile_id"]
        profile = self.by_id[pid]
        if kind == "ratings":
            self.ratings.setdefault(pid, {}).update(event["ratings"])
            self.pharmacists[pid] = event.get("pharmacist", "unknown")
            self.patient_profile.setdefault(self._patient_key(profile), pid)
        elif kind == "reveal":
            self.revealed[pid] = event["prediction"]
            self._count_reveal(profile, event["prediction"])
        elif kind == "agreement":
            self.agreements[pid] = {"agreement": event["agreement"],
                                    "idempotency_key": event.get("idempotency_key")}
            self._count_agreement(profile, event["agreement"])
        else:
            raise ConfigError(f"unknown event kind {kind!r} in log")
        self.seq = max(self.seq, event["seq"] + 1)

    def _count_reveal(self, profile: Profile, prediction: dict) -> None:
        phase = prediction["phase"]
        if phase == "calibration":
            self.agg.calibration_profiles += 1
            return
        self.agg.evaluation_profiles += 1
        dept = profile.department.value
        rated = self.ratings.get(profile.profile_id, {})
        flags = prediction.get("flags")
        if flags is not None:
            flagged = set(flags)
            d_cm = self.agg.dept_orders.setdefault(dept, ConfusionMatrix())
            for drug in sorted(rated):
                predicted = drug in flagged
                truly = rated[drug] == "atypical"
                self.agg.orders.add(predicted, truly)
                d_cm.add(predicted, truly)
        klass = prediction.get("class")
        if klass is not None:
            predicted = klass == "atypical"
            truly = prediction["rated_label"] == "atypical"
            self.agg.profiles_before.add(predicted, truly)
            self.agg.dept_profiles.setdefault(dept, ConfusionMatrix()).add(predicted, truly)

    def _count_agreement(self, profile: Profile, agreement: str) -> None:
        prediction = self.revealed[profile.profile_id]
        if prediction["phase"] == "calibration" or prediction.get("class") is None:
            return
        predicted = prediction["class"] == "atypical"
        truly = predicted if agreement == "agree" else not predicted
        self.agg.profiles_after.add(predicted, truly)

    # -- protocol operations ------------------------------------------------

    def queue_next(self) -> dict:
        with self._lock:
            for p in self.profiles:
                pid = p.profile_id
                if pid in self.revealed and pid in self.agreements:
                    continue
                owner = self.patient_profile.get(self._patient_key(p))
                if owner is not None and owner != pid:
                    continue  # patient already evaluated through another profile
                drugs = p.sorted_drugs()
                rated = self.ratings.get(pid, {})
                return {
                    "profile_id": pid,
                    "department": p.department.value,
                    "phase": self.phase[pid],
                    "drugs": drugs,
                    "ratings": {d: rated.get(d) for d in drugs},
                    "all_rated": all(d in rated for d in drugs),
                    "revealed": pid in self.revealed,
                }
            raise ProtocolError("QUEUE_EMPTY", "no unreviewed profiles left", status=404)

    def post_ratings(self, pid: str, ratings: dict[str, str],
                     pharmacist: str = "unknown") -> dict:
        with self._lock:
            p = self._profile(pid)
            if pid in self.revealed:
                raise ProtocolError("RATING_CLOSED",
                                    "prediction already revealed; ratings are frozen")
            owner = self.patient_profile.get(self._patient_key(p))
            if owner is not None and owner != pid:
                raise ProtocolError(
                    "PATIENT_SEEN",
                    f"patient already evaluated through profile {owner}",
                )
            if not ratings:
                raise ProtocolError("BAD_RATING", "empty ratings body", status=422)
            for drug, rating in ratings.items():
                if drug not in p.drugs:
                    raise ProtocolError("UNKNOWN_ORDER",
                                        f"drug {drug!r} is not part of this profile",
                                        status=422)
                if rating not in ("typical", "atypical"):
                    raise ProtocolError("BAD_RATING",
                                        f"rating must be typical/atypical, got {rating!r}",
                                        status=422)
            self._append({"event": "ratings", "profile_id": pid,
                          "ratings": dict(sorted(ratings.items())),
                          "pharmacist": pharmacist})
            rated = self.ratings[pid]
            return {"profile_id": pid,
                    "rated": len(rated),
                    "total": len(p.drugs),
                    "all_rated": len(rated) == len(p.drugs)}

    def get_prediction(self, pid: str) -> dict:
        with self._lock:
            p = self._profile(pid)
            if pid in self.revealed:
                return dict(self.revealed[pid], profile_id=pid)
            rated = self.ratings.get(pid, {})
            missing = [d for d in p.sorted_drugs() if d not in rated]
            if missing:
                raise ProtocolError(
                    "RATE_FIRST",
                    f"{len(missing)} orders still unrated: {', '.join(missing[:5])}",
                )
            row = self.score_rows[pid]
            phase = self.phase[pid]
            if row.label is not None:
                klass = row.label  # isolation forest carries its own threshold
            else:
                klass = self._classify(row.score, p.department.value)
            rated_label = ("atypical" if any(r == "atypical" for r in rated.values())
                           else "typical")
            prediction = {
                "class": klass,
                "score": row.score if math.isfinite(row.score) else None,
                "score_is_infinite": not math.isfinite(row.score),
                "flags": row.flagged_drugs,
                "phase": phase,
                "rated_label": rated_label,
            }
            self._append({"event": "reveal", "profile_id": pid,
                          "prediction": prediction})
            return dict(prediction, profile_id=pid)

    def post_agreement(self, pid: str, agreement: str,
                       idempotency_key: Optional[str] = None) -> dict:
        with self._lock:
            self._profile(pid)
            if pid not in self.revealed:
                raise ProtocolError("REVEAL_FIRST",
                                    "agreement comes after the prediction reveal")
            if agreement not in ("agree", "disagree"):
                raise ProtocolError("BAD_AGREEMENT",
                                    f"agreement must be agree/disagree, got {agreement!r}",
                                    status=422)
            existing = self.agreements.get(pid)
            if existing is not None:
                if idempotency_key is not None and existing.get("idempotency_key") == idempotency_key:
                    return {"profile_id": pid, "agreement": existing["agreement"],
                            "duplicate": True}
                raise ProtocolError("ALREADY_AGREED",
                                    "an agreement was already recorded for this profile")
            self._append({"event": "agreement", "profile_id": pid,
                          "agreement": agreement,
                          "idempotency_key": idempotency_key})
            return {"profile_id": pid, "agreement": agreement, "duplicate": False}

    def metrics_payload(self) -> dict:
        with self._lock:
            def block(cm: ConfusionMatrix) -> dict:
                return {"matrix": cm.as_dict(), "metrics": metrics(cm)}

            per_dept = {}
            for dept in sorted(set(self.agg.dept_orders) | set(self.agg.dept_profiles)):
                entry = {}
                if dept in self.agg.dept_orders:
                    entry["orders_f1"] = metrics(self.agg.dept_orders[dept])["f1"]
                if dept in self.agg.dept_profiles:
                    entry["profiles_f1"] = metrics(self.agg.dept_profiles[dept])["f1"]
                per_dept[dept] = entry
            return {
                "orders": block(self.agg.orders),
                "profiles_before": block(self.agg.profiles_before),
                "profiles_after": block(self.agg.profiles_after),
                "per_department": per_dept,
                "counts": {
                    "queued": len(self.profiles),
                    "calibration_profiles": self.agg.calibration_profiles,
                    "evaluation_profiles": self.agg.evaluation_profiles,
                    "patients_seen": len(self.patient_profile),
                },
                "model_kind": self.scorer.kind,
            }

    # -- helpers -------------------------------------------------------------

    def _profile(self, pid: str) -> Profile:
        p = self.by_id.get(pid)
        if p is None:
            raise ProtocolError("UNKNOWN_PROFILE", f"no profile {pid!r}", status=404)
        return p

    def _classify(self, score: float, dept: str) -> Optional[str]:
        if not math.isfinite(score):
            return "atypical"  # unseen-profile sentinel outranks every threshold
        try:
            return classify_profile(score, dept, self.thresholds)
        except ClassificationError:
            g = self.thresholds.global_threshold
            if g is None:
                return None
            return "atypical" if score > g else "typical"


def build_service(artifact_path, queue_path, state_dir,
                  thresholds_path=None, calibration_count: Optional[int] = None
                  ) -> ReviewService:
    art = load_artifact(artifact_path)
    scorer = Scorer(art)
    thresholds = None
    if thresholds_path is not None:
        ts = unpack_thresholds(load_artifact(thresholds_path))
        check_thresholds_match(ts, file_digest(artifact_path))
        thresholds = ts
    profiles = load_profiles(queue_path)
    return ReviewService(profiles, scorer, thresholds, state_dir, calibration_count)


def create_app(service: ReviewService):
    """FastAPI shell over a ReviewService."""
    from fastapi import FastAPI, Header, Request
    from fastapi.middleware.cors import CORSMiddleware
    from fastapi.responses import JSONResponse

    app = FastAPI(title="rxsentinel review service")
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])

    @app.exception_handler(ProtocolError)
    async def protocol_error_handler(request: Request, exc: ProtocolError):
        return JSONResponse(status_code=exc.status,
                            content={"code": exc.code, "detail": exc.detail})

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "queued": len(service.profiles)}

    @app.get("/queue/next")
    def queue_next():
        return service.queue_next()

    @app.post("/profiles/{pid}/ratings")
    async def post_ratings(pid: str, request: Request,
                           x_pharmacist_id: str = Header(default="unknown")):
        body = await request.json()
        ratings = body.get("ratings", body if isinstance(body, dict) else {})
        if not isinstance(ratings, dict):
            raise ProtocolError("BAD_RATING", "ratings must be an object", status=422)
        return service.post_ratings(pid, ratings, pharmacist=x_pharmacist_id)

    @app.get("/profiles/{pid}/prediction")
    def get_prediction(pid: str):
        return service.get_prediction(pid)

    @app.post("/profiles/{pid}/agreement")
    async def post_agreement(pid: str, request: Request):
        body = await request.json()
        return service.post_agreement(pid, body.get("agreement"),
                                      idempotency_key=body.get("idempotency_key"))

    @app.get("/metrics")
    def get_metrics():
        return service.metrics_payload()

    return app
