"""Central finite differences for scalar functions of named float64 arrays."""

import numpy as np


def fd_gradient(f, arrays: dict, eps: float = 1e-5) -> dict:
    """Numerical gradient of ``f()`` w.r.t. every array in ``arrays`` (perturbed in place)."""
    out = {}
    for name, a in arrays.items():
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + eps
            up = f()
            a[idx] = orig - eps
            down = f()
            a[idx] = orig
            g[idx] = (up - down) / (2 * eps)
        out[name] = g
    return out


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Norm-wise relative error, floored so all-zero tensors compare by absolute difference."""
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(num / den)


def fd_gradients_multi(f, arrays: dict, eps: float = 1e-5) -> dict:
    """Like :func:`fd_gradient` for vector-valued ``f``; result arrays gain a leading output axis."""
    out = {}
    for name, a in arrays.items():
        cols = []
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + eps
            up = np.asarray(f(), dtype=np.float64)
            a[idx] = orig - eps
            down = np.asarray(f(), dtype=np.float64)
            a[idx] = orig
            cols.append((up - down) / (2 * eps))
        out[name] = np.stack(cols, axis=-1).reshape((-1,) + a.shape) if cols else np.zeros((0,) + a.shape)
    return out
