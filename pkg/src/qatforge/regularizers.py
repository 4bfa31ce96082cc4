"""Regularizers that pull weights onto quantization grids, scales onto powers
of two, and small weights to zero, plus their training gradients.

Gradient conventions follow the trainer's update rules: the quantizer's
integer code is treated as locally constant (it is piecewise constant in both
the value and the scale), and contributions from points sitting exactly on a
cell boundary are dropped, because the true objective is not differentiable
there. All reductions are plain float64 sums in array order, so results are
deterministic.
"""

from __future__ import annotations

import math

import numpy as np

from .quantizers import (
    code_signed,
    code_unsigned,
    on_cell_boundary,
    on_cell_boundary_unsigned,
    on_grid_midpoint,
    on_pow2_boundary,
    round_half_away,
    round_pow2,
)


def _as_layer_list(value, num_layers):
    if np.isscalar(value):
        return [value] * num_layers
    value = list(value)
    if len(value) != num_layers:
        raise ValueError(f"expected {num_layers} per-layer values, got {len(value)}")
    return value


def msqe_weights(weights, deltas, bits):
    """Mean squared quantization error over all layers pooled.

    weights: sequence of arrays, one per layer. deltas and bits may be
    scalars or per-layer sequences. Returns (1/N) * sum over every weight of
    (w - Q(w))^2 with N the total weight count; zero exactly when every
    weight sits on a level.
    """
    weights = list(weights)
    deltas = _as_layer_list(deltas, len(weights))
    bits = _as_layer_list(bits, len(weights))
    if any(d <= 0 for d in deltas):
        raise ValueError("quantizer scale must be positive")
    total = 0.0
    count = 0
    for w, d, b in zip(weights, deltas, bits):
        err = w - d * code_signed(w, d, b)
        total += float(np.sum(err * err))
        count += w.size
    if count == 0:
        raise ValueError("no weights given")
    return total / count


def msqe_weights_grad(w, delta, bits, count):
    """(2/N)(w - Q(w)) away from cell boundaries, 0 on them."""
    w = np.asarray(w, dtype=np.float64)
    err = w - delta * code_signed(w, delta, bits)
    return (2.0 / count) * err * ~on_cell_boundary(w, delta, bits)


def msqe_activations(acts, delta, bits):
    """Per-layer mean squared quantization error of an activation batch."""
    acts = np.asarray(acts, dtype=np.float64)
    if acts.size == 0:
        raise ValueError("empty activation set")
    err = acts - delta * code_unsigned(acts, delta, bits)
    return float(np.mean(err * err))


def grid_msqe_sum(values, step):
    """Sum of squared distances to the nearest multiple of step (unclipped
    grid; used for biases riding the accumulator scale)."""
    values = np.asarray(values, dtype=np.float64)
    err = values - step * round_half_away(values / step)
    return float(np.sum(err * err))


def grid_msqe_grad(values, step):
    """d/dvalues of grid_msqe_sum, zero at grid midpoints."""
    values = np.asarray(values, dtype=np.float64)
    err = values - step * round_half_away(values / step)
    return 2.0 * err * ~on_grid_midpoint(values, step)


def scale_grad_weights(w, delta, bits, lam, count):
    """d/d(delta) of lam * (1/N) sum (w - delta*code)^2, code held fixed:
    -(2*lam/N) * sum (w - Q(w)) * code, boundary points excluded."""
    w = np.asarray(w, dtype=np.float64)
    code = code_signed(w, delta, bits)
    err = w - delta * code
    keep = ~on_cell_boundary(w, delta, bits)
    return float(-(2.0 * lam / count) * np.sum(err * code * keep))


def scale_grad_activations(acts, delta, bits, zeta):
    """Unsigned analog of scale_grad_weights with the per-layer 1/|A| norm."""
    acts = np.asarray(acts, dtype=np.float64)
    if acts.size == 0:
        raise ValueError("empty activation set")
    code = code_unsigned(acts, delta, bits)
    err = acts - delta * code
    keep = ~on_cell_boundary_unsigned(acts, delta, bits)
    return float(-(2.0 * zeta / acts.size) * np.sum(err * code * keep))


def pow2_penalty(scales):
    """Mean squared distance of the scales to their nearest power of two."""
    s = np.asarray(scales, dtype=np.float64)
    if s.size == 0:
        raise ValueError("no scales given")
    if not np.all(s > 0):
        raise ValueError("scales must be positive")
    err = s - round_pow2(s)
    return float(np.mean(err * err))


def pow2_penalty_grad(scale, gamma, num_layers):
    """The additive scale-gradient term (2*gamma/L)(delta - round_pow2(delta)),
    zero at powers of two and at the tie points 3 * 2^k."""
    scale = np.asarray(scale, dtype=np.float64)
    keep = ~on_pow2_boundary(scale)
    return (2.0 * gamma / num_layers) * (scale - round_pow2(scale)) * keep


def prune_threshold(weights, ratio):
    """Nearest-rank percentile of the pooled weight magnitudes: the k-th
    smallest |w| with k = ceil(ratio * N); 0.0 when ratio is 0."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"prune ratio must lie in [0, 1), got {ratio}")
    mags = np.sort(np.concatenate([np.abs(np.asarray(w)).ravel() for w in weights]))
    k = math.ceil(ratio * mags.size)
    return 0.0 if k == 0 else float(mags[k - 1])


def partial_l2(weights, theta, count):
    """(1/N) * sum of w^2 over weights strictly inside the band |w| < theta."""
    if theta < 0:
        raise ValueError("threshold must be non-negative")
    total = 0.0
    for w in weights:
        w = np.asarray(w, dtype=np.float64)
        inside = np.abs(w) < theta
        total += float(np.sum(w[inside] ** 2))
    return total / count


def partial_l2_grad(w, theta, count):
    """(2/N) * w inside the band, 0 outside; the boundary |w| = theta is
    outside the strict inequality so it gets no pull."""
    w = np.asarray(w, dtype=np.float64)
    return (2.0 / count) * w * (np.abs(w) < theta)
