"""Shared test oracles: finite differences, Jacobi SVD, brute-force Otsu."""
import numpy as np


def finite_difference(f, params, h=1e-5):
    """Central-difference gradient of the scalar function f() w.r.t. each array.

    Perturbs the arrays in place and restores them, so `f` must read the live
    arrays (e.g. a closure over model parameters).
    """
    grads = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gf = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads[name] = g
    return grads


def max_rel_error(analytic, numeric, floor=1e-4):
    """Worst elementwise |a - n| / max(|a|, |n|, floor) across parameter blocks."""
    worst = 0.0
    for k in analytic:
        a = np.asarray(analytic[k], dtype=np.float64)
        n = np.asarray(numeric[k], dtype=np.float64)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


def jacobi_singular_values(a, sweeps=100, tol=1e-15):
    """Singular values by one-sided Jacobi rotations (independent dense oracle)."""
    a = np.array(a, dtype=np.float64)
    if a.shape[0] < a.shape[1]:
        a = a.T
    n = a.shape[1]
    for _ in range(sweeps):
        off = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                aii = float(a[:, i] @ a[:, i])
                ajj = float(a[:, j] @ a[:, j])
                aij = float(a[:, i] @ a[:, j])
                if aii * ajj > 0:
                    off = max(off, abs(aij) / np.sqrt(aii * ajj))
                if aij == 0.0:
                    continue
                tau = (ajj - aii) / (2.0 * aij)
                t = np.sign(tau) / (abs(tau) + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                rot = np.array([[c, s], [-s, c]])
                a[:, [i, j]] = a[:, [i, j]] @ rot
        if off < tol:
            break
    sv = np.sqrt((a * a).sum(axis=0))
    return np.sort(sv)[::-1]


def build_random_layer(rng, n_in=None, n_out=None):
    from rxsentinel.nn import DenseLayer

    n_in = n_in or int(rng.integers(2, 7))
    n_out = n_out or int(rng.integers(2, 7))
    activation = ["identity", "relu", "selu", "sigmoid"][int(rng.integers(4))]
    dropout = 0.0 if rng.random() < 0.5 else 0.3
    batch_norm = bool(rng.random() < 0.4)
    layer = DenseLayer(n_in, n_out, activation, dropout=dropout,
                       batch_norm=batch_norm, rng=rng)
    if batch_norm:
        layer.gamma = rng.uniform(0.5, 1.5, n_out)
        layer.beta = rng.uniform(-0.5, 0.5, n_out)
        layer.running_mean = rng.uniform(-0.5, 0.5, n_out)
        layer.running_var = rng.uniform(0.5, 2.0, n_out)
    return layer


def _far_from_kinks(caches, margin=5e-4):
    for c in caches:
        if float(np.abs(c["z"]).min()) < margin:
            return False
    return True


def gradcheck_layer(seed):
    """Max relative error (analytic vs central FD) for one random layer config.

    Configurations whose pre-activations sit within 5e-4 of a ReLU/SELU kink
    are re-drawn: central differences are invalid across a kink.
    """
    from rxsentinel.nn import Mlp

    for attempt in range(60):
        rng = np.random.default_rng(seed * 1009 + attempt)
        layer = build_random_layer(rng)
        train = bool(rng.random() < 0.6)
        batch = int(rng.integers(2, 6))
        x = rng.uniform(-2.0, 2.0, (batch, layer.n_in))
        mask_seed = int(rng.integers(2**31))
        projection = rng.standard_normal((batch, layer.n_out))

        def run():
            y, caches = layer.forward(x, train=train,
                                      rng=np.random.default_rng(mask_seed))
            return y, caches

        y, cache = run()
        if not _far_from_kinks([cache]):
            continue
        _, grads = layer.backward(cache, projection)
        params = dict(layer.params())
        params["x"] = x
        dx, _ = layer.backward(cache, projection)
        grads["x"] = dx
        numeric = finite_difference(lambda: float((run()[0] * projection).sum()), params)
        return max_rel_error(grads, numeric)
    raise AssertionError("could not draw a kink-free configuration")


def gradcheck_network(seed):
    """Max relative error for a composed 2-3 layer network under a random loss."""
    from rxsentinel.nn import Mlp, bce_loss, l1_loss, l2_loss

    for attempt in range(60):
        rng = np.random.default_rng(seed * 2003 + attempt)
        widths = [int(rng.integers(2, 6)) for _ in range(int(rng.integers(3, 5)))]
        layers = []
        for a, b in zip(widths, widths[1:]):
            layers.append(build_random_layer(rng, n_in=a, n_out=b))
        loss_kind = ["bce", "l1", "l2"][int(rng.integers(3))]
        if loss_kind == "bce":
            layers[-1].activation = "sigmoid"
        net = Mlp(layers)
        batch = int(rng.integers(2, 6))
        x = rng.uniform(-2.0, 2.0, (batch, widths[0]))
        if loss_kind == "bce":
            target = (rng.random((batch, widths[-1])) < 0.5).astype(float)
        else:
            target = rng.uniform(-1.0, 1.0, (batch, widths[-1]))
        mask_seed = int(rng.integers(2**31))

        def run():
            return net.forward(x, train=True, rng=np.random.default_rng(mask_seed))

        def loss_of(y):
            if loss_kind == "bce":
                return bce_loss(y, target)[:2]
            if loss_kind == "l1":
                loss, da, _ = l1_loss(y, target)
                return loss, da
            loss, da, _ = l2_loss(y, target)
            return loss, da

        y, caches = run()
        if not _far_from_kinks(caches):
            continue
        if loss_kind == "bce" and (y.min() < 1e-3 or y.max() > 1 - 1e-3):
            continue
        if loss_kind == "l1" and float(np.abs(y - target).min()) < 5e-4:
            continue
        _, dy = loss_of(y)
        _, grads = net.backward(caches, dy)
        numeric = finite_difference(lambda: loss_of(run()[0])[0], net.params())
        return max_rel_error(grads, numeric)
    raise AssertionError("could not draw a kink-free configuration")


def otsu_brute_force(values, bins=256):
    """Exhaustive between-class-variance maximizer over all interior bin edges."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    edges = np.linspace(lo, hi, bins + 1)
    best_edge = None
    best_var = -np.inf
    for e in edges[1:-1]:
        left = v[v < e]
        right = v[v >= e]
        if left.size == 0 or right.size == 0:
            continue
        var = left.size * right.size * (left.mean() - right.mean()) ** 2
        if var > best_var:
            best_var = var
            best_edge = float(e)
    return best_edge
