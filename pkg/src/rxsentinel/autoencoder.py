"""Multi-hot profile autoencoder: reconstruction probabilities per drug.

Architecture is fixed: V -> 256 -> 64 -> 256 -> V with ReLU hidden layers,
sigmoid output, and dropout 0.1 after each 256-node layer. Training minimizes
binary cross-entropy with Adam (lr 1e-3, batch 256); with no validation set it
runs a fixed 11 epochs, otherwise early stopping applies.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyCorpusError, NumericError
from .nn import Adam, DenseLayer, EarlyStopRule, Mlp, bce_loss, check_early_stop

HIDDEN_WIDE = 256
HIDDEN_NARROW = 64
DROPOUT = 0.1


@dataclass
class AeTrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    fixed_epochs: int = 11  # used only when no validation set is given
    max_epochs: int = 200
    early_stop: EarlyStopRule = field(default_factory=EarlyStopRule)
    flag_cut: float = 0.5


class AutoencoderModel:
    def __init__(self, net: Mlp):
        self.net = net

    @classmethod
    def build(cls, n_drugs: int, seed: int) -> "AutoencoderModel":
        rng = np.random.default_rng(seed)
        layers = [
            DenseLayer(n_drugs, HIDDEN_WIDE, "relu", dropout=DROPOUT, rng=rng),
            DenseLayer(HIDDEN_WIDE, HIDDEN_NARROW, "relu", rng=rng),
            DenseLayer(HIDDEN_NARROW, HIDDEN_WIDE, "relu", dropout=DROPOUT, rng=rng),
            DenseLayer(HIDDEN_WIDE, n_drugs, "sigmoid", rng=rng),
        ]
        return cls(Mlp(layers))

    @property
    def n_drugs(self) -> int:
        return self.net.layers[0].n_in

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        """Inference-mode per-drug probabilities (no dropout)."""
        return self.net.infer(np.atleast_2d(np.asarray(x, dtype=np.float64)))


def train_autoencoder(x_train: np.ndarray, cfg: AeTrainConfig, seed: int,
                      x_val: np.ndarray | None = None
                      ) -> tuple[AutoencoderModel, list[dict]]:
    """Train on multi-hot rows; returns (model, per-epoch loss history)."""
    x_train = np.asarray(x_train, dtype=np.float64)
    if x_train.ndim != 2 or x_train.shape[0] == 0:
        raise EmptyCorpusError("autoencoder training needs at least one profile")
    model = AutoencoderModel.build(x_train.shape[1], seed)
    rng = np.random.default_rng(seed + 1)
    optimizer = Adam(model.net.params(), lr=cfg.learning_rate)
    n = x_train.shape[0]
    history: list[dict] = []
    val_losses: list[float] = []
    epochs = cfg.fixed_epochs if x_val is None else cfg.max_epochs
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, cfg.batch_size):
            batch = x_train[order[lo : lo + cfg.batch_size]]
            probs, caches = model.net.forward(batch, train=True, rng=rng)
            loss, dp = bce_loss(probs, batch)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            total += loss * batch.shape[0]
            _, grads = model.net.backward(caches, dp)
            optimizer.step(model.net.params(), grads)
        entry = {"epoch": epoch, "train_loss": total / n}
        if x_val is not None:
            val_loss, _ = bce_loss(model.net.infer(x_val), x_val)
            entry["val_loss"] = val_loss
            val_losses.append(val_loss)
            if check_early_stop(cfg.early_stop, val_losses):
                history.append(entry)
                break
        history.append(entry)
    return model, history


def flag_orders(probabilities: np.ndarray, present: np.ndarray,
                cut: float = 0.5) -> np.ndarray:
    """Boolean per-drug flags: present in the profile and reconstructed below cut."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    present = np.asarray(present, dtype=bool)
    return present & (probabilities < cut)


def flagged_drugs(probabilities: np.ndarray, drugs, vocab, cut: float = 0.5) -> set[str]:
    """Same rule, but in drug-code space for a single profile."""
    out = set()
    for d in drugs:
        if d in vocab and probabilities[vocab.index_of(d)] < cut:
            out.add(d)
    return out


def reconstruction_accuracy(model: AutoencoderModel, x: np.ndarray,
                            cut: float = 0.5) -> float:
    """Mean fraction of each profile's drugs recovered at probability >= cut."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[0] == 0:
        raise EmptyCorpusError("no profiles to measure reconstruction on")
    probs = model.reconstruct(x)
    present = x >= 0.5
    recovered = (probs >= cut) & present
    sizes = present.sum(axis=1)
    keep = sizes > 0
    if not keep.any():
        raise EmptyCorpusError("all profiles encoded empty (out-of-vocabulary?)")
    return float((recovered.sum(axis=1)[keep] / sizes[keep]).mean())
