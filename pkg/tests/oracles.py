"""Independent reference computations the tests check the library against."""

from __future__ import annotations

import numpy as np

from tsclab import nn


def finite_diff_failures(loss_fn, params: dict, rng: np.random.Generator,
                         coords_per_tensor: int = 4, eps: float = 1e-4,
                         tol: float = 1e-4) -> list[tuple]:
    """Compare tape gradients against central finite differences.

    `loss_fn` rebuilds the forward pass from the live parameter tensors on
    every call.  A sampled subset of coordinates per tensor is perturbed in
    place.  A coordinate that misses at the probe step but matches when the
    step shrinks tenfold sits on a ReLU kink, not a wrong derivative, and is
    not reported.  Returns (name, index, analytic, numeric) mismatches.
    """
    loss = loss_fn()
    nn.backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}
    for p in params.values():
        p.grad = None

    def central(flat, i, step):
        orig = flat[i]
        flat[i] = orig + step
        with nn.no_grad():
            up = loss_fn().item()
        flat[i] = orig - step
        with nn.no_grad():
            down = loss_fn().item()
        flat[i] = orig
        return (up - down) / (2.0 * step)

    failures = []
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = min(coords_per_tensor, flat.size)
        idx = rng.choice(flat.size, size=n, replace=False)
        for i in idx:
            a = analytic[name].reshape(-1)[i]
            mismatch = None
            for step in (eps, eps / 10.0, eps / 100.0):
                numeric = central(flat, i, step)
                denom = max(abs(a), abs(numeric))
                if denom <= 1e-7 or abs(a - numeric) / denom <= tol:
                    mismatch = None
                    break
                mismatch = (name, int(i), float(a), float(numeric))
            if mismatch is not None:
                failures.append(mismatch)
    return failures


def directional_derivative_gap(loss_fn, params: dict, rng: np.random.Generator,
                               eps: float = 1e-4) -> float:
    """Relative gap between g.v and the central difference along a random v."""
    loss = loss_fn()
    nn.backward(loss)
    tensors = list(params.values())
    direction = [rng.standard_normal(p.data.shape) for p in tensors]
    norm = np.sqrt(sum(float(np.sum(d * d)) for d in direction))
    direction = [d / norm for d in direction]   # unit step keeps ReLU kinks away
    dot = sum(float((p.grad if p.grad is not None else 0.0 * p.data).reshape(-1)
                    @ d.reshape(-1)) for p, d in zip(tensors, direction))
    for p in tensors:
        p.grad = None
    for p, d in zip(tensors, direction):
        p.data += eps * d
    with nn.no_grad():
        up = loss_fn().item()
    for p, d in zip(tensors, direction):
        p.data -= 2 * eps * d
    with nn.no_grad():
        down = loss_fn().item()
    for p, d in zip(tensors, direction):
        p.data += eps * d
    numeric = (up - down) / (2.0 * eps)
    return abs(dot - numeric) / max(abs(dot), abs(numeric), 1e-7)


def naive_softmax(weights) -> np.ndarray:
    """Softmax without max-subtraction (stability reference)."""
    e = np.exp(np.asarray(weights, dtype=np.float64))
    return e / e.sum()


def reference_pca(x: np.ndarray, standardize_last: bool = True):
    """Full eigendecomposition PCA used as the deflation oracle."""
    x = np.asarray(x, dtype=np.float64).copy()
    x -= x.mean(axis=0)
    if standardize_last:
        std = x[:, -1].std()
        if std > 0:
            x[:, -1] /= std
    cov = (x.T @ x) / (x.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    return vals[order], vecs[:, order].T, x
