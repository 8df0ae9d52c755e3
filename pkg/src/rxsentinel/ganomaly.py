"""Adversarially trained encoder-decoder-encoder anomaly model.

The generator is enc1 -> dec -> enc2 (SELU hidden layers, dropout 0.1 after
256-wide layers, sigmoid decoder output). A separate feature extractor
(ReLU + batch norm, 128 then 64 nodes, sigmoid real/fake head) supplies the
adversarial feature-matching signal. Per batch the extractor trains first on
real-vs-reconstruction BCE, then the generator trains on

    total = 100 * BCE(x_hat, x) + 2 * L2(f(x), f(x_hat))
          + 1 * (0.8 * L1 + 0.2 * L2)(z1, z2)

with f the extractor's 64-wide feature layer. A profile's anomaly score is
the (0.8 L1 + 0.2 L2) distance between its two latent codes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyCorpusError, ModeCollapseError, NumericError
from .nn import Adam, DenseLayer, EarlyStopRule, Mlp, bce_loss, check_early_stop, l2_loss

COLLAPSE_VARIANCE = 1e-8


@dataclass(frozen=True)
class GanomalyLossWeights:
    contextual: float = 100.0
    adversarial: float = 2.0
    encoder: float = 1.0
    encoder_l1: float = 0.8
    encoder_l2: float = 0.2


@dataclass
class GanomalyTrainConfig:
    lr_generator: float = 1e-3
    lr_feature: float = 1e-6
    batch_size: int = 256
    fixed_epochs: int = 21  # used only when no validation set is given
    max_epochs: int = 200
    early_stop: EarlyStopRule = field(default_factory=EarlyStopRule)
    flag_cut: float = 0.5


class GanomalyModel:
    def __init__(self, enc1: Mlp, dec: Mlp, enc2: Mlp, feat: Mlp, head: DenseLayer):
        self.enc1 = enc1
        self.dec = dec
        self.enc2 = enc2
        self.feat = feat
        self.head = head

    @classmethod
    def build(cls, n_drugs: int, seed: int, wide: int = 256, narrow: int = 64,
              feat_wide: int = 128, feat_narrow: int = 64,
              dropout: float = 0.1) -> "GanomalyModel":
        rng = np.random.default_rng(seed)
        enc1 = Mlp([
            DenseLayer(n_drugs, wide, "selu", dropout=dropout, rng=rng),
            DenseLayer(wide, narrow, "selu", rng=rng),
        ])
        dec = Mlp([
            DenseLayer(narrow, wide, "selu", dropout=dropout, rng=rng),
            DenseLayer(wide, n_drugs, "sigmoid", rng=rng),
        ])
        enc2 = Mlp([
            DenseLayer(n_drugs, wide, "selu", dropout=dropout, rng=rng),
            DenseLayer(wide, narrow, "selu", rng=rng),
        ])
        feat = Mlp([
            DenseLayer(n_drugs, feat_wide, "relu", batch_norm=True, rng=rng),
            DenseLayer(feat_wide, feat_narrow, "relu", batch_norm=True, rng=rng),
        ])
        head = DenseLayer(feat_narrow, 1, "sigmoid", rng=rng)
        return cls(enc1, dec, enc2, feat, head)

    @property
    def n_drugs(self) -> int:
        return self.enc1.layers[0].n_in

    def generator_params(self):
        out = {}
        for name, net in (("enc1", self.enc1), ("dec", self.dec), ("enc2", self.enc2)):
            for k, v in net.params().items():
                out[f"{name}.{k}"] = v
        return out

    def extractor_params(self):
        out = {f"feat.{k}": v for k, v in self.feat.params().items()}
        for k, v in self.head.params().items():
            out[f"head.{k}"] = v
        return out

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        """Inference-mode decoder probabilities per drug."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return self.dec.infer(self.enc1.infer(x))

    def encoder_scores(self, x: np.ndarray) -> np.ndarray:
        """Per-profile anomaly score: 0.8 * mean|z1 - z2| + 0.2 * mean(z1 - z2)^2."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        z1 = self.enc1.infer(x)
        z2 = self.enc2.infer(self.dec.infer(z1))
        d = z1 - z2
        return 0.8 * np.abs(d).mean(axis=1) + 0.2 * (d * d).mean(axis=1)


def per_drug_scores(model: GanomalyModel, x: np.ndarray, cut: float = 0.5
                    ) -> tuple[np.ndarray, np.ndarray]:
    """(probabilities, flags): a present drug is flagged when its probability < cut."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    probs = model.reconstruct(x)
    flags = (x >= 0.5) & (probs < cut)
    return probs, flags


def check_reconstruction_variance(xh: np.ndarray, epoch: int) -> None:
    """Abort when the decoder emits (nearly) the same row for every input."""
    if float(np.var(xh, axis=0).mean()) < COLLAPSE_VARIANCE:
        raise ModeCollapseError(
            f"reconstruction batch variance below {COLLAPSE_VARIANCE:g} at epoch "
            f"{epoch}: generator output no longer depends on input"
        )


def _encoder_distance(z1, z2, w: GanomalyLossWeights):
    d = z1 - z2
    loss = w.encoder_l1 * float(np.abs(d).mean()) + w.encoder_l2 * float((d * d).mean())
    dz1 = (w.encoder_l1 * np.sign(d) + w.encoder_l2 * 2.0 * d) / d.size
    return loss, dz1, -dz1


def generator_loss_value(model: GanomalyModel, x: np.ndarray,
                         w: GanomalyLossWeights, rng=None) -> float:
    """Total generator loss as a plain value (used by finite-difference checks)."""
    z1, _ = model.enc1.forward(x, train=True, rng=rng)
    xh, _ = model.dec.forward(z1, train=True, rng=rng)
    f_real, _ = model.feat.forward(x, train=True)
    f_fake, _ = model.feat.forward(xh, train=True)
    z2, _ = model.enc2.forward(xh, train=True, rng=rng)
    l_con, _ = bce_loss(xh, x)
    l_adv, _, _ = l2_loss(f_fake, f_real)
    l_enc, _, _ = _encoder_distance(z1, z2, w)
    return w.contextual * l_con + w.adversarial * l_adv + w.encoder * l_enc


def generator_step_grads(model: GanomalyModel, x, w: GanomalyLossWeights,
                         z1, c_enc1, xh, c_dec, rng=None):
    """Losses and generator gradients given a completed enc1/dec forward pass.

    The real-branch features are constants for the generator; the fake branch
    backpropagates through the extractor (without touching its parameters)
    and through enc2 into the reconstruction.
    """
    f_real, _ = model.feat.forward(x, train=True)
    f_fake, c_ff = model.feat.forward(xh, train=True)
    z2, c_enc2 = model.enc2.forward(xh, train=True, rng=rng)

    l_con, dxh_con = bce_loss(xh, x)
    l_adv, d_fake, _ = l2_loss(f_fake, f_real)
    l_enc, dz1_enc, dz2_enc = _encoder_distance(z1, z2, w)
    total = w.contextual * l_con + w.adversarial * l_adv + w.encoder * l_enc

    dxh = w.contextual * dxh_con
    dxh = dxh + w.adversarial * model.feat.backward(c_ff, d_fake)[0]
    dxh_enc2, g_enc2 = model.enc2.backward(c_enc2, w.encoder * dz2_enc)
    dxh = dxh + dxh_enc2
    dz1_dec, g_dec = model.dec.backward(c_dec, dxh)
    dz1 = w.encoder * dz1_enc + dz1_dec
    _, g_enc1 = model.enc1.backward(c_enc1, dz1)

    grads = {}
    for name, g in (("enc1", g_enc1), ("dec", g_dec), ("enc2", g_enc2)):
        for k, v in g.items():
            grads[f"{name}.{k}"] = v
    parts = {"contextual": l_con, "adversarial": l_adv, "encoder": l_enc, "total": total}
    return parts, grads


def _extractor_step(model: GanomalyModel, x, xh, optimizer: Adam):
    """Real/fake BCE on the head; updates only extractor + head parameters."""
    ones = np.ones((x.shape[0], 1))
    zeros = np.zeros((x.shape[0], 1))
    f_real, c_fr = model.feat.forward(x, train=True)
    p_real, c_hr = model.head.forward(f_real, train=True)
    f_fake, c_ff = model.feat.forward(xh, train=True)
    p_fake, c_hf = model.head.forward(f_fake, train=True)
    loss_r, dp_r = bce_loss(p_real, ones)
    loss_f, dp_f = bce_loss(p_fake, zeros)

    dh_r, g_head_r = model.head.backward(c_hr, 0.5 * dp_r)
    _, g_feat_r = model.feat.backward(c_fr, dh_r)
    dh_f, g_head_f = model.head.backward(c_hf, 0.5 * dp_f)
    _, g_feat_f = model.feat.backward(c_ff, dh_f)

    grads = {}
    for k in g_feat_r:
        grads[f"feat.{k}"] = g_feat_r[k] + g_feat_f[k]
    for k in g_head_r:
        grads[f"head.{k}"] = g_head_r[k] + g_head_f[k]
    optimizer.step(model.extractor_params(), grads)
    return 0.5 * (loss_r + loss_f)


def _validation_loss(model: GanomalyModel, x, w: GanomalyLossWeights) -> float:
    z1 = model.enc1.infer(x)
    xh = model.dec.infer(z1)
    z2 = model.enc2.infer(xh)
    l_con, _ = bce_loss(xh, x)
    l_adv, _, _ = l2_loss(model.feat.infer(xh), model.feat.infer(x))
    l_enc, _, _ = _encoder_distance(z1, z2, w)
    return w.contextual * l_con + w.adversarial * l_adv + w.encoder * l_enc


def train_ganomaly(x_train: np.ndarray, cfg: GanomalyTrainConfig,
                   weights: GanomalyLossWeights, seed: int,
                   x_val: np.ndarray | None = None
                   ) -> tuple[GanomalyModel, list[dict]]:
    """Alternating extractor/generator training; deterministic given seed."""
    x_train = np.asarray(x_train, dtype=np.float64)
    if x_train.ndim != 2 or x_train.shape[0] == 0:
        raise EmptyCorpusError("ganomaly training needs at least one profile")
    model = GanomalyModel.build(x_train.shape[1], seed)
    rng = np.random.default_rng(seed + 1)
    opt_gen = Adam(model.generator_params(), lr=cfg.lr_generator)
    opt_feat = Adam(model.extractor_params(), lr=cfg.lr_feature)
    n = x_train.shape[0]
    history: list[dict] = []
    val_losses: list[float] = []
    epochs = cfg.fixed_epochs if x_val is None else cfg.max_epochs
    for epoch in range(epochs):
        order = rng.permutation(n)
        sums = {"contextual": 0.0, "adversarial": 0.0, "encoder": 0.0, "extractor": 0.0}
        for lo in range(0, n, cfg.batch_size):
            batch = x_train[order[lo : lo + cfg.batch_size]]
            m = batch.shape[0]
            z1, c_enc1 = model.enc1.forward(batch, train=True, rng=rng)
            xh, c_dec = model.dec.forward(z1, train=True, rng=rng)
            # constant output is collapse only when the inputs themselves vary
            if batch.shape[0] > 1 and float(np.var(batch, axis=0).mean()) >= COLLAPSE_VARIANCE:
                check_reconstruction_variance(xh, epoch)
            sums["extractor"] += m * _extractor_step(model, batch, xh, opt_feat)
            parts, grads = generator_step_grads(
                model, batch, weights, z1, c_enc1, xh, c_dec, rng=rng
            )
            if not np.isfinite(parts["total"]):
                raise NumericError(f"non-finite generator loss at epoch {epoch}")
            opt_gen.step(model.generator_params(), grads)
            for k in ("contextual", "adversarial", "encoder"):
                sums[k] += m * parts[k]
        entry = {"epoch": epoch}
        for k in ("contextual", "adversarial", "encoder", "extractor"):
            entry[k] = sums[k] / n
        entry["total"] = (weights.contextual * entry["contextual"]
                          + weights.adversarial * entry["adversarial"]
                          + weights.encoder * entry["encoder"])
        if x_val is not None:
            entry["val_loss"] = _validation_loss(model, x_val, weights)
            val_losses.append(entry["val_loss"])
            if check_early_stop(cfg.early_stop, val_losses):
                history.append(entry)
                break
        history.append(entry)
    return model, history
