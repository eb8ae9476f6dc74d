"""Shared finite-difference gradient checking helpers."""

import numpy as np


def rel_err(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


def numeric_grad(f, arr, idx, h=1e-5):
    """Central difference of scalar f() w.r.t. arr.flat[idx] (in place)."""
    orig = arr.flat[idx]
    arr.flat[idx] = orig + h
    fp = f()
    arr.flat[idx] = orig - h
    fm = f()
    arr.flat[idx] = orig
    return (fp - fm) / (2.0 * h)


def gradcheck(build, tensors, rng, h=1e-5, rtol=1e-4, max_coords=5):
    """Compare reverse-mode gradients of a scalar against central differences.

    build() must recompute the scalar Tensor from the current .data of the
    given tensors. Samples up to max_coords coordinates per tensor. Returns
    the worst relative error seen (and asserts it is below rtol).
    """
    for t in tensors:
        t.zero_grad()
    build().backward()
    worst = 0.0
    for t in tensors:
        assert t.grad is not None, "no gradient reached a checked tensor"
        size = t.data.size
        coords = rng.choice(size, size=min(max_coords, size), replace=False)
        for idx in coords:
            num = numeric_grad(lambda: build().item(), t.data, int(idx), h)
            ana = float(t.grad.flat[int(idx)])
            worst = max(worst, rel_err(ana, num))
    assert worst < rtol, f"max relative gradient error {worst:.3e} >= {rtol}"
    return worst
