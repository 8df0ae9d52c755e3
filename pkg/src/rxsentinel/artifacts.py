"""Versioned binary artifact container and a uniform scoring facade.

Layout: magic "RXSA", little-endian u32 format version, u64 header length,
a canonical JSON header (kind, vocabulary, metadata, payload, array table),
then raw little-endian array blobs. No timestamps anywhere: identical inputs
produce identical bytes, and load(save(model)) scores bit-identically.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import baselines
from .autoencoder import AutoencoderModel
from .errors import ArtifactVersionError, ConfigError, VocabularyMismatchError
from .ganomaly import GanomalyModel
from .nn import Mlp, bce_loss
from .orders import Profile, Vocabulary
from .thresholds import ThresholdSet

MAGIC = b"RXSA"
CONTAINER_VERSION = 1
MODEL_KINDS = ("frequency", "iforest", "autoencoder", "ganomaly")
_DTYPES = {"<f8", "<i4", "<i8"}


@dataclass
class Artifact:
    kind: str
    vocab_tokens: list[str]
    payload: dict
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def save_artifact(path, art: Artifact) -> str:
    """Write the container; returns the sha256 digest of the written bytes."""
    table = []
    blobs = []
    offset = 0
    for name in sorted(art.arrays):
        arr = np.ascontiguousarray(art.arrays[name])
        if arr.dtype == np.float64:
            dtype = "<f8"
        elif arr.dtype == np.int32:
            dtype = "<i4"
        elif arr.dtype == np.int64:
            dtype = "<i8"
        else:
            raise ConfigError(f"unsupported array dtype {arr.dtype} for {name!r}")
        blob = arr.astype(dtype, copy=False).tobytes()
        table.append({"name": name, "dtype": dtype, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "kind": art.kind,
        "vocab": art.vocab_tokens,
        "meta": art.meta,
        "payload": art.payload,
        "arrays": table,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    data = b"".join(
        [MAGIC, struct.pack("<I", CONTAINER_VERSION),
         struct.pack("<Q", len(header_bytes)), header_bytes, *blobs]
    )
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def file_digest(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def load_artifact(path) -> Artifact:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ArtifactVersionError("not an artifact container (bad magic)")
    (version,) = struct.unpack("<I", data[4:8])
    if version != CONTAINER_VERSION:
        raise ArtifactVersionError(
            f"container version {version} unsupported (expected {CONTAINER_VERSION})"
        )
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    base = 16 + hlen
    arrays = {}
    for entry in header["arrays"]:
        if entry["dtype"] not in _DTYPES:
            raise ArtifactVersionError(f"unsupported dtype {entry['dtype']!r}")
        start = base + entry["offset"]
        raw = data[start : start + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"]).copy()
        arrays[entry["name"]] = arr
    return Artifact(kind=header["kind"], vocab_tokens=header["vocab"],
                    payload=header["payload"], arrays=arrays, meta=header["meta"])


# ---------------------------------------------------------------------------
# kind-specific packing


def pack_frequency(model: baselines.FrequencyModel, vocab: Vocabulary, meta: dict) -> Artifact:
    return Artifact("frequency", vocab.tokens, {"counts": model.counts}, {}, meta)


def pack_iforest(forest: baselines.IsolationForest, basis: baselines.LsiBasis,
                 vocab: Vocabulary, meta: dict) -> Artifact:
    arrays = {
        "components": basis.components,
        "singular_values": basis.singular_values,
        "explained_variance_ratio": basis.explained_variance_ratio,
        "feature": forest.feature,
        "threshold": forest.threshold,
        "left": forest.left,
        "right": forest.right,
        "adjust": forest.adjust,
        "roots": forest.roots,
    }
    payload = {
        "k": basis.k,
        "psi": forest.psi,
        "tree_count": forest.tree_count,
        "contamination": forest.contamination,
        "c_psi": forest.c_psi,
        "score_threshold": forest.score_threshold,
    }
    return Artifact("iforest", vocab.tokens, payload, arrays, meta)


def pack_autoencoder(model: AutoencoderModel, vocab: Vocabulary, meta: dict,
                     flag_cut: float = 0.5) -> Artifact:
    return Artifact("autoencoder", vocab.tokens,
                    {"specs": model.net.specs(), "flag_cut": flag_cut},
                    dict(model.net.state_arrays()), meta)


def pack_ganomaly(model: GanomalyModel, vocab: Vocabulary, meta: dict,
                  flag_cut: float = 0.5) -> Artifact:
    arrays = {}
    specs = {}
    for name, net in (("enc1", model.enc1), ("dec", model.dec),
                      ("enc2", model.enc2), ("feat", model.feat)):
        specs[name] = net.specs()
        for k, v in net.state_arrays().items():
            arrays[f"{name}.{k}"] = v
    specs["head"] = [model.head.spec()]
    for k, v in model.head.state_arrays().items():
        arrays[f"head.0.{k}"] = v
    return Artifact("ganomaly", vocab.tokens, {"specs": specs, "flag_cut": flag_cut},
                    arrays, meta)


def pack_thresholds(ts: ThresholdSet, meta: dict) -> Artifact:
    payload = {
        "thresholds": ts.thresholds,
        "trim_quantile": ts.trim_quantile,
        "bins": ts.bins,
        "sample_counts": ts.sample_counts,
        "skipped": ts.skipped,
        "global_threshold": ts.global_threshold,
        "artifact_digest": ts.artifact_digest,
    }
    return Artifact("thresholds", [], payload, {}, meta)


def unpack_thresholds(art: Artifact) -> ThresholdSet:
    if art.kind != "thresholds":
        raise ConfigError(f"expected a thresholds artifact, got {art.kind!r}")
    p = art.payload
    return ThresholdSet(
        thresholds={k: float(v) for k, v in p["thresholds"].items()},
        trim_quantile=p["trim_quantile"],
        bins=p["bins"],
        sample_counts={k: int(v) for k, v in p.get("sample_counts", {}).items()},
        skipped=list(p.get("skipped", [])),
        global_threshold=p.get("global_threshold"),
        artifact_digest=p.get("artifact_digest"),
    )


def _unpack_mlp(specs, arrays, prefix) -> Mlp:
    own = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
    return Mlp.from_specs(specs, own)


def unpack_model(art: Artifact):
    """Rebuild the in-memory model object for a model artifact."""
    if art.kind == "frequency":
        return baselines.FrequencyModel(
            counts={k: int(v) for k, v in art.payload["counts"].items()}
        )
    if art.kind == "iforest":
        basis = baselines.LsiBasis(
            components=art.arrays["components"],
            singular_values=art.arrays["singular_values"],
            explained_variance_ratio=art.arrays["explained_variance_ratio"],
            k=int(art.payload["k"]),
        )
        forest = baselines.IsolationForest(
            feature=art.arrays["feature"],
            threshold=art.arrays["threshold"],
            left=art.arrays["left"],
            right=art.arrays["right"],
            adjust=art.arrays["adjust"],
            roots=art.arrays["roots"],
            psi=int(art.payload["psi"]),
            tree_count=int(art.payload["tree_count"]),
            contamination=float(art.payload["contamination"]),
            c_psi=float(art.payload["c_psi"]),
            score_threshold=float(art.payload["score_threshold"]),
        )
        return basis, forest
    if art.kind == "autoencoder":
        net = Mlp.from_specs(art.payload["specs"], art.arrays)
        return AutoencoderModel(net)
    if art.kind == "ganomaly":
        specs = art.payload["specs"]
        return GanomalyModel(
            enc1=_unpack_mlp(specs["enc1"], art.arrays, "enc1."),
            dec=_unpack_mlp(specs["dec"], art.arrays, "dec."),
            enc2=_unpack_mlp(specs["enc2"], art.arrays, "enc2."),
            feat=_unpack_mlp(specs["feat"], art.arrays, "feat."),
            head=_unpack_mlp(specs["head"], art.arrays, "head.").layers[0],
        )
    raise ConfigError(f"unknown artifact kind {art.kind!r}")


# ---------------------------------------------------------------------------
# uniform scoring surface


@dataclass
class ScoreRow:
    profile_id: str
    department: str
    score: float
    label: Optional[str] = None  # iforest carries its own contamination threshold
    flagged_drugs: Optional[list[str]] = None  # neural models only
    oov: int = 0


class Scorer:
    """Score profiles through any loaded model artifact."""

    def __init__(self, art: Artifact):
        if art.kind not in MODEL_KINDS:
            raise ConfigError(f"not a model artifact: {art.kind!r}")
        self.kind = art.kind
        self.vocab = Vocabulary(art.vocab_tokens)
        self.flag_cut = float(art.payload.get("flag_cut", 0.5))
        self._model = unpack_model(art)

    def score_profiles(self, profiles: list[Profile]) -> list[ScoreRow]:
        rows: list[ScoreRow] = []
        if self.kind == "frequency":
            for p in profiles:
                in_vocab = [d for d in p.drugs if d in self.vocab]
                rows.append(ScoreRow(
                    profile_id=p.profile_id,
                    department=p.department.value,
                    score=baselines.freq_score(self._model, p.drugs),
                    oov=len(p.drugs) - len(in_vocab),
                ))
            return rows

        x = np.zeros((len(profiles), len(self.vocab)))
        oovs = []
        for i, p in enumerate(profiles):
            x[i], oov = self.vocab.multi_hot(p.drugs)
            oovs.append(oov)

        if self.kind == "iforest":
            basis, forest = self._model
            emb = baselines.lsi_transform(basis, x)
            labels, scores = baselines.iforest_classify(forest, emb)
            for i, p in enumerate(profiles):
                rows.append(ScoreRow(p.profile_id, p.department.value,
                                     float(scores[i]), label=str(labels[i]),
                                     oov=oovs[i]))
            return rows

        if self.kind == "autoencoder":
            probs = self._model.reconstruct(x)
            pc = np.clip(probs, 1e-7, 1 - 1e-7)
            per_row = -(x * np.log(pc) + (1 - x) * np.log1p(-pc)).mean(axis=1)
            scores = per_row
        else:  # ganomaly
            scores = self._model.encoder_scores(x)
            probs = self._model.reconstruct(x)
        flags = (x >= 0.5) & (probs < self.flag_cut)
        for i, p in enumerate(profiles):
            flagged = sorted(self.vocab.drug_at(j) for j in np.flatnonzero(flags[i]))
            rows.append(ScoreRow(p.profile_id, p.department.value, float(scores[i]),
                                 flagged_drugs=flagged, oov=oovs[i]))
        return rows


def check_thresholds_match(ts: ThresholdSet, artifact_digest: str) -> None:
    """Thresholds are pinned to the artifact whose scores calibrated them."""
    if ts.artifact_digest is not None and ts.artifact_digest != artifact_digest:
        raise VocabularyMismatchError(
            "threshold set was calibrated for a different artifact "
            f"({ts.artifact_digest[:12]}... vs {artifact_digest[:12]}...)"
        )
