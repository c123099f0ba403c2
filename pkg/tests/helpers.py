"""Shared numeric test utilities: finite differences and comparison rules."""

import numpy as np


def numeric_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar-valued f at x (float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a, b, floor=1.0):
    """Max elementwise |a - b| / max(floor, |a|, |b|)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))
    if a.size == 0:
        return 0.0
    return float((np.abs(a - b) / denom).max())


def assert_grads_close(analytic, numeric, rtol=1e-4):
    err = rel_err(analytic, numeric)
    assert err < rtol, f"gradient mismatch: rel err {err:.3e} >= {rtol:.1e}"


def away_from_kinks(rng, shape, margin=0.05, scale=1.0):
    """Sample values whose magnitude stays >= margin (avoids relu kinks
    when finite-differencing with small h)."""
    x = rng.uniform(margin, scale, size=shape)
    signs = rng.choice([-1.0, 1.0], size=shape)
    return x * signs
