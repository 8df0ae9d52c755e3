"""Dense neural-network engine: layers, losses, Adam, early stopping.

Everything is float64 numpy with hand-written analytic gradients; the test
suite checks every gradient against central finite differences. Forward order
inside a layer is linear -> batch norm (optional) -> activation -> inverted
dropout (training only).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NumericError

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772
BN_EPS = 1e-5
BN_MOMENTUM = 0.9
BCE_CLAMP = 1e-7

ACTIVATIONS = ("identity", "relu", "selu", "sigmoid")


def _act_forward(name: str, z: np.ndarray) -> np.ndarray:
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    if name == "selu":
        return SELU_LAMBDA * np.where(z > 0.0, z, SELU_ALPHA * np.expm1(z))
    raise ValueError(f"unknown activation {name!r}")


def _act_backward(name: str, z: np.ndarray, a: np.ndarray, da: np.ndarray) -> np.ndarray:
    if name == "identity":
        return da
    if name == "relu":
        return da * (z > 0.0)
    if name == "sigmoid":
        return da * a * (1.0 - a)
    if name == "selu":
        return da * SELU_LAMBDA * np.where(z > 0.0, 1.0, SELU_ALPHA * np.exp(z))
    raise ValueError(f"unknown activation {name!r}")


class DenseLayer:
    """Fully connected layer with optional batch norm and inverted dropout."""

    def __init__(self, n_in, n_out, activation="identity", dropout=0.0,
                 batch_norm=False, rng=None):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if not (0.0 <= dropout < 1.0):
            raise ValueError(f"dropout must be in [0, 1), got {dropout}")
        if rng is None:
            rng = np.random.default_rng(0)
        limit = np.sqrt(6.0 / (n_in + n_out))
        self.W = rng.uniform(-limit, limit, size=(n_in, n_out))
        self.b = np.zeros(n_out)
        self.activation = activation
        self.dropout = float(dropout)
        self.batch_norm = bool(batch_norm)
        if self.batch_norm:
            self.gamma = np.ones(n_out)
            self.beta = np.zeros(n_out)
            self.running_mean = np.zeros(n_out)
            self.running_var = np.ones(n_out)

    @property
    def n_in(self):
        return self.W.shape[0]

    @property
    def n_out(self):
        return self.W.shape[1]

    def forward(self, x, train=False, rng=None):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise DimensionError(
                f"expected input of width {self.n_in}, got shape {x.shape}"
            )
        z = x @ self.W + self.b
        cache = {"x": x, "train": bool(train)}
        if self.batch_norm:
            if train:
                mu = z.mean(axis=0)
                var = z.var(axis=0)
                self.running_mean = BN_MOMENTUM * self.running_mean + (1 - BN_MOMENTUM) * mu
                self.running_var = BN_MOMENTUM * self.running_var + (1 - BN_MOMENTUM) * var
            else:
                mu, var = self.running_mean, self.running_var
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            z_hat = (z - mu) * inv_std
            z = self.gamma * z_hat + self.beta
            cache["z_hat"] = z_hat
            cache["inv_std"] = inv_std
        cache["z"] = z
        a = _act_forward(self.activation, z)
        cache["a"] = a
        if train and self.dropout > 0.0:
            if rng is None:
                raise ValueError("training-mode dropout requires an rng")
            keep = 1.0 - self.dropout
            mask = (rng.random(a.shape) < keep) / keep
            cache["mask"] = mask
            a = a * mask
        return a, cache

    def backward(self, cache, dy):
        dy = np.asarray(dy, dtype=np.float64)
        if dy.shape != cache["a"].shape:
            raise DimensionError(f"gradient shape {dy.shape} != output {cache['a'].shape}")
        da = dy * cache["mask"] if "mask" in cache else dy
        dz = _act_backward(self.activation, cache["z"], cache["a"], da)
        grads = {}
        if self.batch_norm:
            z_hat, inv_std = cache["z_hat"], cache["inv_std"]
            grads["gamma"] = (dz * z_hat).sum(axis=0)
            grads["beta"] = dz.sum(axis=0)
            dz_hat = dz * self.gamma
            if cache["train"]:
                # gradient through the batch statistics
                dz = (dz_hat - dz_hat.mean(axis=0)
                      - z_hat * (dz_hat * z_hat).mean(axis=0)) * inv_std
            else:
                dz = dz_hat * inv_std
        x = cache["x"]
        grads["W"] = x.T @ dz
        grads["b"] = dz.sum(axis=0)
        dx = dz @ self.W.T
        return dx, grads

    def params(self):
        p = {"W": self.W, "b": self.b}
        if self.batch_norm:
            p["gamma"] = self.gamma
            p["beta"] = self.beta
        return p

    def state_arrays(self):
        """All persistent arrays, trainable or not (for serialization)."""
        arrays = dict(self.params())
        if self.batch_norm:
            arrays["running_mean"] = self.running_mean
            arrays["running_var"] = self.running_var
        return arrays

    def spec(self):
        return {
            "n_in": int(self.n_in),
            "n_out": int(self.n_out),
            "activation": self.activation,
            "dropout": self.dropout,
            "batch_norm": self.batch_norm,
        }

    @classmethod
    def from_spec(cls, spec, arrays):
        layer = cls(spec["n_in"], spec["n_out"], spec["activation"],
                    spec["dropout"], spec["batch_norm"])
        layer.W = np.array(arrays["W"], dtype=np.float64)
        layer.b = np.array(arrays["b"], dtype=np.float64)
        if layer.batch_norm:
            layer.gamma = np.array(arrays["gamma"], dtype=np.float64)
            layer.beta = np.array(arrays["beta"], dtype=np.float64)
            layer.running_mean = np.array(arrays["running_mean"], dtype=np.float64)
            layer.running_var = np.array(arrays["running_var"], dtype=np.float64)
        return layer


class Mlp:
    """A stack of DenseLayers sharing one forward/backward interface."""

    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, train=False, rng=None):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x, train=train, rng=rng)
            caches.append(c)
        return x, caches

    def infer(self, x):
        y, _ = self.forward(x, train=False)
        return y

    def backward(self, caches, dy):
        grads = {}
        for i in reversed(range(len(self.layers))):
            dy, g = self.layers[i].backward(caches[i], dy)
            for k, v in g.items():
                grads[f"{i}.{k}"] = v
        return dy, grads

    def params(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params().items():
                out[f"{i}.{k}"] = v
        return out

    def state_arrays(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.state_arrays().items():
                out[f"{i}.{k}"] = v
        return out

    def specs(self):
        return [layer.spec() for layer in self.layers]

    @classmethod
    def from_specs(cls, specs, arrays):
        layers = []
        for i, spec in enumerate(specs):
            own = {k.split(".", 1)[1]: v for k, v in arrays.items()
                   if k.startswith(f"{i}.")}
            layers.append(DenseLayer.from_spec(spec, own))
        return cls(layers)


# ---------------------------------------------------------------------------
# losses (all return mean-reduced scalars and gradients of that mean)


def bce_loss(p, y):
    """Mean binary cross-entropy; probabilities clamped to [1e-7, 1 - 1e-7]."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise DimensionError(f"shape mismatch: {p.shape} vs {y.shape}")
    pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    loss = float(-(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)).mean())
    inside = (p > BCE_CLAMP) & (p < 1.0 - BCE_CLAMP)
    dp = np.where(inside, (pc - y) / (pc * (1.0 - pc)), 0.0) / p.size
    return loss, dp


def l1_loss(a, b):
    """Mean absolute error; subgradient 0 at exact ties."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = a - b
    g = np.sign(d) / d.size
    return float(np.abs(d).mean()), g, -g


def l2_loss(a, b):
    """Mean squared error."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = a - b
    g = 2.0 * d / d.size
    return float((d * d).mean()), g, -g


# ---------------------------------------------------------------------------
# optimizer and early stopping


class Adam:
    """Bias-corrected Adam over a fixed dict of parameter arrays (in-place)."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in parameter block {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


@dataclass(frozen=True)
class EarlyStopRule:
    min_delta: float = 1e-4
    patience: int = 5


def check_early_stop(rule: EarlyStopRule, losses) -> bool:
    """True when the best loss has not improved by >= min_delta for `patience` epochs."""
    if len(losses) == 0:
        raise ValueError("empty loss history")
    best = np.inf
    since = 0
    for loss in losses:
        if best - loss >= rule.min_delta:
            best = loss
            since = 0
        else:
            since += 1
    return since >= rule.patience
