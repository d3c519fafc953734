"""Shared test utilities."""

import numpy as np

from solv import binding
from solv.diffcore import ParamStore


def binding_store(d_slot=8, k_slots=3, window=3, n_layers=2, seed=0,
                  scale=0.3) -> ParamStore:
    """Small randomly initialized parameter set for binding tests."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    shapes = dict(binding.binding_param_shapes(d_slot, k_slots, window))
    shapes.update(binding.transformer_param_shapes(d_slot, n_layers))
    for name, shape in shapes.items():
        if name.endswith(("ln_g", "ln1_g", "ln2_g", "ln_q.g")):
            store.register(name, np.ones(shape))
        elif name == "bind.init.scale":
            store.register(name, np.abs(rng.normal(0.4, 0.05, size=shape)) + 0.05)
        else:
            store.register(name, rng.normal(scale=scale, size=shape))
    return store


def finite_diff(f, tensors, h=1e-5, rng=None, max_coords=40):
    """Central finite differences of a scalar function at sampled coords.

    Returns the worst relative error against the analytic gradients that
    must already be populated on the tensors.
    """
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for t in tensors:
        assert t.grad is not None, "analytic gradient missing"
        flat = t.data.reshape(-1)
        gflat = t.grad.reshape(-1)
        coords = np.arange(flat.size)
        if flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            lp = f()
            flat[i] = orig - h
            lm = f()
            flat[i] = orig
            fd = (lp - lm) / (2 * h)
            rel = abs(gflat[i] - fd) / max(abs(gflat[i]), abs(fd), 1e-6)
            worst = max(worst, rel)
    return worst
