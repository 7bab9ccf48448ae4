"""Central finite-difference checker shared by the MIL tests and acceptance."""
import numpy as np

from cersdx.mil import GatedMilModel, PARAM_NAMES, mil_gradients, mil_loss

EPS = 1e-5


def numeric_gradients(X, label, model, eps=EPS):
    out = {}
    for name in PARAM_NAMES:
        p = model.params[name]
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = mil_loss(X, label, model)
            flat[i] = old - eps
            down = mil_loss(X, label, model)
            flat[i] = old
            gflat[i] = (up - down) / (2 * eps)
        out[name] = g
    return out


def relative_error(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale < 1e-12 else float(np.linalg.norm(a - b) / scale)


def check_seed(seed, multi_branch=False, n_classes=2):
    rng = np.random.default_rng(seed)
    d = 6
    model = GatedMilModel.init(d, n_classes, latent=8, hidden=5, dropout=0.0, multi_branch=multi_branch, seed=seed)
    for v in model.params.values():
        v += rng.normal(0, 0.1, size=v.shape)
    X = rng.standard_normal((int(rng.integers(1, 9)), d))
    label = int(rng.integers(n_classes))
    analytic = mil_gradients(X, label, model)
    numeric = numeric_gradients(X, label, model)
    return {k: relative_error(analytic[k], numeric[k]) for k in PARAM_NAMES}
