"""Command-line entry points: synth, train, retrain, score, calibrate, evaluate, serve."""
from __future__ import annotations

import hashlib
import json
import math
import os
import sys
from datetime import date
from pathlib import Path

import click
import numpy as np

from . import artifacts, baselines, synth
from .autoencoder import AeTrainConfig, train_autoencoder
from .errors import RxError
from .ganomaly import GanomalyLossWeights, GanomalyTrainConfig, train_ganomaly
from .orders import (Profile, build_vocabulary, encode_profiles, hospitalization_year,
                     load_order_log, load_profiles, read_profiles, reconstruct_profiles,
                     write_order_log, write_profiles)
from .thresholds import (ConfusionMatrix, calibrate_thresholds, classify_profile,
                         department_ratios, metrics, pr_curve, pr_curve_csv_lines,
                         validity_ordering)

DEFAULT_K = 512
DEFAULT_TREES = 100
DEFAULT_PSI = 256
DEFAULT_CONTAMINATION = 0.20


@click.group()
def main():
    """Medication-order anomaly detection engine and review workbench."""


def _fail(message: str):
    raise click.ClickException(message)


def _parse_month(raw: str) -> tuple[int, int]:
    parts = raw.split("-")
    if len(parts) < 2:
        _fail(f"expected YYYY-MM, got {raw!r}")
    return int(parts[0]), int(parts[1])


# ---------------------------------------------------------------------------
# synth


@main.command("synth")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", default=424242, show_default=True, type=int)
@click.option("--preset", type=click.Choice(["default", "acceptance"]), default="default",
              show_default=True)
@click.option("--vocab-size", type=int, default=None)
@click.option("--hosp-per-year", type=int, default=None)
@click.option("--years", default=None, help="inclusive span, e.g. 2009:2018")
@click.option("--anomaly-rate", type=float, default=None)
def synth_cmd(out_dir, seed, preset, vocab_size, hosp_per_year, years, anomaly_rate):
    """Generate a synthetic order log with planted anomalies and ground truth."""
    if preset == "acceptance":
        cfg = synth.acceptance_config(seed=seed)
    else:
        cfg = synth.SynthConfig(seed=seed)
    if vocab_size is not None:
        cfg.vocab_size = vocab_size
    if hosp_per_year is not None:
        cfg.hospitalizations_per_year = hosp_per_year
    if years is not None:
        lo, hi = years.split(":")
        cfg.years = (int(lo), int(hi))
    if anomaly_rate is not None:
        cfg.anomaly_rate = anomaly_rate

    try:
        hosps, events, truth = synth.generate_corpus(cfg)
        profiles = reconstruct_profiles(events, hosps)
        flags = synth.profile_flags(profiles, hosps, events, truth)
    except RxError as exc:
        _fail(str(exc))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_order_log(out / "orders.jsonl", hosps, events)
    with open(out / "order_truth.jsonl", "w", encoding="utf-8") as fh:
        for i, flag in enumerate(truth.order_flags):
            fh.write(json.dumps({"order_index": i, "atypical": flag},
                                separators=(",", ":")) + "\n")
    write_profiles(out / "profiles.jsonl", profiles)
    with open(out / "profile_truth.jsonl", "w", encoding="utf-8") as fh:
        for p in profiles:
            fh.write(json.dumps({"id": p.profile_id, "atypical": flags[p.profile_id]},
                                separators=(",", ":")) + "\n")
    planted = truth.planted_count()
    click.echo(f"wrote {len(hosps)} hospitalizations, {len(events)} orders "
               f"({planted} planted atypical), {len(profiles)} profiles to {out}")


# ---------------------------------------------------------------------------
# train / retrain


def _profiles_in_window(data_path, as_of_year: int, window_years: int):
    hosps, events = load_order_log(data_path)
    profiles = reconstruct_profiles(events, hosps)
    years = {h.id: hospitalization_year(h) for h in hosps}
    lo, hi = as_of_year - window_years, as_of_year - 1
    kept = [p for p in profiles if lo <= years[p.hospitalization_id] <= hi]
    if not kept:
        available = sorted({y for y in years.values()})
        _fail(f"no profiles in training window {lo}-{hi}; "
              f"data covers years {available}")
    return kept, (lo, hi)


def _train_artifact(model, profiles, window, seed, k, trees, psi, contamination,
                    epochs, as_of):
    vocab = build_vocabulary(profiles)
    config = {"model": model, "window": list(window), "seed": seed, "k": k,
              "trees": trees, "psi": psi, "contamination": contamination,
              "epochs": epochs}
    meta = {
        "as_of": as_of,
        "window_years": list(window),
        "seed": seed,
        "n_profiles": len(profiles),
        "config_digest": hashlib.sha256(
            json.dumps(config, sort_keys=True).encode()).hexdigest(),
    }
    if model == "frequency":
        fm = baselines.freq_fit(profiles)
        return artifacts.pack_frequency(fm, vocab, meta)
    x, _ = encode_profiles(profiles, vocab)
    if model == "iforest":
        k_eff = min(k, len(vocab), len(profiles))
        basis = baselines.lsi_fit(x, k_eff, seed=seed)
        emb = baselines.lsi_transform(basis, x)
        psi_eff = min(psi, emb.shape[0])
        forest = baselines.iforest_fit(emb, tree_count=trees, psi=psi_eff,
                                       contamination=contamination, seed=seed)
        meta["k"] = k_eff
        return artifacts.pack_iforest(forest, basis, vocab, meta)
    if model == "autoencoder":
        cfg = AeTrainConfig()
        if epochs is not None:
            cfg.fixed_epochs = epochs
        m, history = train_autoencoder(x, cfg, seed)
        meta["epochs"] = len(history)
        return artifacts.pack_autoencoder(m, vocab, meta)
    if model == "ganomaly":
        cfg = GanomalyTrainConfig()
        if epochs is not None:
            cfg.fixed_epochs = epochs
        m, history = train_ganomaly(x, cfg, GanomalyLossWeights(), seed)
        meta["epochs"] = len(history)
        return artifacts.pack_ganomaly(m, vocab, meta)
    _fail(f"unknown model kind {model!r}")


_MODEL_CHOICE = click.Choice(["frequency", "iforest", "autoencoder", "ganomaly"])


@main.command("train")
@click.option("--model", type=_MODEL_CHOICE, required=True)
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--as-of", "as_of", required=True, help="training cutoff month, YYYY-MM")
@click.option("--window-years", default=10, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--k", default=DEFAULT_K, show_default=True, type=int)
@click.option("--trees", default=DEFAULT_TREES, show_default=True, type=int)
@click.option("--psi", default=DEFAULT_PSI, show_default=True, type=int)
@click.option("--contamination", default=DEFAULT_CONTAMINATION, show_default=True, type=float)
@click.option("--epochs", default=None, type=int, help="override fixed epoch count")
def train_cmd(model, data_path, as_of, window_years, seed, out_path, k, trees, psi,
              contamination, epochs):
    """Train a model on the profiles of the window preceding --as-of."""
    year, _ = _parse_month(as_of)
    profiles, window = _profiles_in_window(data_path, year, window_years)
    try:
        art = _train_artifact(model, profiles, window, seed, k, trees, psi,
                              contamination, epochs, as_of)
    except RxError as exc:
        _fail(str(exc))
    digest = artifacts.save_artifact(out_path, art)
    click.echo(f"trained {model} on {len(profiles)} profiles "
               f"(years {window[0]}-{window[1]}); artifact {out_path} sha256={digest[:12]}")


@main.command("retrain")
@click.option("--model", type=_MODEL_CHOICE, required=True)
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--start", required=True, help="first retrain month, YYYY-MM")
@click.option("--months", default=3, show_default=True, type=int)
@click.option("--window-years", default=10, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--k", default=DEFAULT_K, show_default=True, type=int)
@click.option("--trees", default=DEFAULT_TREES, show_default=True, type=int)
@click.option("--psi", default=DEFAULT_PSI, show_default=True, type=int)
@click.option("--contamination", default=DEFAULT_CONTAMINATION, show_default=True, type=float)
@click.option("--epochs", default=None, type=int)
def retrain_cmd(model, data_path, start, months, window_years, seed, out_dir, k,
                trees, psi, contamination, epochs):
    """Monthly retrain simulation: one artifact per month, rolling window."""
    year, month = _parse_month(start)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for _ in range(months):
        tag = f"{year:04d}-{month:02d}"
        profiles, window = _profiles_in_window(data_path, year, window_years)
        try:
            art = _train_artifact(model, profiles, window, seed, k, trees, psi,
                                  contamination, epochs, tag)
        except RxError as exc:
            _fail(str(exc))
        path = out / f"{model}-{tag}.rxa"
        digest = artifacts.save_artifact(path, art)
        click.echo(f"{tag}: {len(profiles)} profiles -> {path} sha256={digest[:12]}")
        month += 1
        if month > 12:
            month = 1
            year += 1


# ---------------------------------------------------------------------------
# score


def _load_any_profiles(data_path) -> list[Profile]:
    with open(data_path, "r", encoding="utf-8") as fh:
        first = ""
        for line in fh:
            if line.strip():
                first = line
                break
    try:
        kind = json.loads(first).get("kind") if first else None
    except json.JSONDecodeError:
        kind = None
    if kind == "profile":
        return load_profiles(data_path)
    hosps, events = load_order_log(data_path)
    return reconstruct_profiles(events, hosps)


@main.command("score")
@click.option("--artifact", "artifact_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--thresholds", "thresholds_path", default=None,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def score_cmd(artifact_path, data_path, thresholds_path, out_path):
    """Score profiles: raw score, class when thresholds allow, per-drug flags."""
    try:
        art = artifacts.load_artifact(artifact_path)
        scorer = artifacts.Scorer(art)
        ts = None
        if thresholds_path is not None:
            ts = artifacts.unpack_thresholds(artifacts.load_artifact(thresholds_path))
            artifacts.check_thresholds_match(ts, artifacts.file_digest(artifact_path))
        profiles = _load_any_profiles(data_path)
        rows = scorer.score_profiles(profiles)
    except RxError as exc:
        _fail(str(exc))
    total_oov = sum(r.oov for r in rows)
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"kind": "score_meta",
                             "model_kind": scorer.kind,
                             "artifact_digest": artifacts.file_digest(artifact_path),
                             "oov_total": total_oov},
                            separators=(",", ":")) + "\n")
        for r in rows:
            rec = {"kind": "score", "id": r.profile_id, "department": r.department,
                   "score": r.score, "oov": r.oov}
            if r.label is not None:
                rec["class"] = r.label
            elif ts is not None and scorer.kind in ("ganomaly", "autoencoder"):
                try:
                    rec["class"] = classify_profile(r.score, r.department, ts)
                except RxError:
                    if ts.global_threshold is not None:
                        rec["class"] = ("atypical" if r.score > ts.global_threshold
                                        else "typical")
            if r.flagged_drugs is not None:
                rec["flags"] = r.flagged_drugs
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
    if total_oov:
        click.echo(f"warning: {total_oov} out-of-vocabulary orders dropped from encoding",
                   err=True)
    click.echo(f"scored {len(rows)} profiles with {scorer.kind} -> {out_path}")


# ---------------------------------------------------------------------------
# calibrate


def _read_score_file(path):
    meta = None
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if rec.get("kind") == "score_meta":
                meta = rec
            elif rec.get("kind") == "score":
                rows.append(rec)
    return meta, rows


@main.command("calibrate")
@click.option("--scores", "scores_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--bins", default=256, show_default=True, type=int)
@click.option("--trim", default=0.90, show_default=True, type=float)
@click.option("--min-samples", default=20, show_default=True, type=int)
def calibrate_cmd(scores_path, out_path, bins, trim, min_samples):
    """Per-department Otsu thresholds from a score file (outliers trimmed)."""
    meta, rows = _read_score_file(scores_path)
    pairs = [(r["department"], float(r["score"])) for r in rows
             if math.isfinite(float(r["score"]))]
    if not pairs:
        _fail("score file holds no finite scores to calibrate on")
    try:
        ts = calibrate_thresholds(pairs, bins=bins, trim_quantile=trim,
                                  min_samples=min_samples)
    except RxError as exc:
        _fail(str(exc))
    if meta is not None:
        ts.artifact_digest = meta.get("artifact_digest")
    art = artifacts.pack_thresholds(ts, meta={"source_scores": os.path.basename(scores_path)})
    artifacts.save_artifact(out_path, art)
    for dept in ts.skipped:
        click.echo(f"warning: department {dept} skipped "
                   f"({ts.sample_counts.get(dept, 0)} < {min_samples} samples)", err=True)
    click.echo(f"calibrated {len(ts.thresholds)} department thresholds -> {out_path}")


# ---------------------------------------------------------------------------
# evaluate


def _read_truth(path):
    truth = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            truth[rec["id"]] = bool(rec["atypical"])
    return truth


@main.command("evaluate")
@click.option("--scores", "scores_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--truth", "truth_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", default=None, type=click.Path(dir_okay=False),
              help="line-delimited report destination (default: stdout)")
@click.option("--pr-csv", "pr_csv_path", default=None, type=click.Path(dir_okay=False))
def evaluate_cmd(scores_path, truth_path, out_path, pr_csv_path):
    """Confusion matrix, metrics, PR curve + AUPR, department ratios."""
    _, rows = _read_score_file(scores_path)
    truth = _read_truth(truth_path)
    matched = [r for r in rows if r["id"] in truth]
    if not matched:
        _fail("no score ids found in the truth file (empty intersection)")
    missing = [r["id"] for r in rows if r["id"] not in truth]
    if missing:
        _fail(f"{len(missing)} score ids missing from truth (first: {missing[0]})")

    records = []
    scored = [(float(r["score"]), truth[r["id"]]) for r in matched]
    try:
        curve = pr_curve(scored)
    except RxError as exc:
        _fail(str(exc))
    records.append({"record": "aupr", "value": curve.aupr,
                    "prevalence": sum(t for _, t in scored) / len(scored)})

    classified = [r for r in matched if "class" in r]
    if classified:
        cm = ConfusionMatrix()
        for r in classified:
            cm.add(r["class"] == "atypical", truth[r["id"]])
        records.append({"record": "confusion_matrix", **cm.as_dict()})
        records.append({"record": "metrics", **metrics(cm)})
        ratios = department_ratios((r["department"], r["class"]) for r in classified)
        for dept in sorted(ratios.per_department):
            records.append({"record": "department_ratio", "department": dept,
                            "ratio": ratios.per_department[dept],
                            "n": ratios.counts[dept]})
        records.append({"record": "overall_ratio", "ratio": ratios.overall})
        try:
            records.append({"record": "validity_ordering",
                            "ok": validity_ordering(ratios)})
        except RxError:
            pass
        per_dept_cm: dict[str, ConfusionMatrix] = {}
        for r in classified:
            per_dept_cm.setdefault(r["department"], ConfusionMatrix()).add(
                r["class"] == "atypical", truth[r["id"]])
        for dept in sorted(per_dept_cm):
            records.append({"record": "department_f1", "department": dept,
                            "f1": metrics(per_dept_cm[dept])["f1"]})

    for recall, precision in curve.points:
        records.append({"record": "pr_point", "recall": recall, "precision": precision})

    lines = [json.dumps(r, separators=(",", ":")) for r in records]
    if out_path is None:
        for line in lines:
            click.echo(line)
    else:
        Path(out_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
        click.echo(f"wrote {len(lines)} report records -> {out_path}")
    if pr_csv_path is not None:
        Path(pr_csv_path).write_text("\n".join(pr_curve_csv_lines(curve)) + "\n",
                                     encoding="utf-8")
        click.echo(f"wrote PR curve CSV -> {pr_csv_path}")


# ---------------------------------------------------------------------------
# serve


@main.command("serve")
@click.option("--artifact", "artifact_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--queue", "queue_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--thresholds", "thresholds_path", default=None,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--state-dir", default=None, type=click.Path(file_okay=False),
              help="defaults to $RXSENTINEL_STATE_DIR or ./rxsentinel_state")
@click.option("--calibration-count", default=None, type=int,
              help="calibration-phase profiles per department (default: a third of the queue)")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
def serve_cmd(artifact_path, queue_path, thresholds_path, state_dir,
              calibration_count, host, port):
    """Run the pharmacist review service."""
    import uvicorn

    from .service import build_service, create_app

    if state_dir is None:
        state_dir = os.environ.get("RXSENTINEL_STATE_DIR", "rxsentinel_state")
    try:
        service = build_service(artifact_path, queue_path, state_dir,
                                thresholds_path, calibration_count)
    except RxError as exc:
        _fail(str(exc))
    click.echo(f"serving {len(service.profiles)} queued profiles on {host}:{port} "
               f"(state: {state_dir})")
    uvicorn.run(create_app(service), host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
