"""Central finite differences for verifying analytic gradients (64-bit)."""
import numpy as np


def numerical_gradient(loss_fn, params: dict, h: float = 1e-4, indices: dict | None = None) -> dict:
    """
    Central-difference gradient of loss_fn() w.r.t. each parameter's data.
    loss_fn takes no arguments and reads the parameters' current values.
    indices optionally limits the check to a subset of flat positions per parameter.
    """
    grads = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        g = np.zeros(flat.shape, dtype=np.float64)
        positions = range(flat.size) if indices is None or name not in indices else indices[name]
        for i in positions:
            original = flat[i]
            flat[i] = original + h
            plus = float(loss_fn())
            flat[i] = original - h
            minus = float(loss_fn())
            flat[i] = original
            g[i] = (plus - minus) / (2 * h)
        grads[name] = g.reshape(p.shape)
    return grads


def relative_error(analytic, numeric, floor: float = 1e-3) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale
