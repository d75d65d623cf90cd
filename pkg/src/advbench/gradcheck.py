"""Finite-difference verification of reverse-mode gradients.

``finite_diff_check`` compares the taped gradient of a scalar-valued
function against central differences. Piecewise-linear ops (relu, the max
pools) make the comparison meaningless near their kinks, so ``kink_margin``
measures how close a recorded forward pass came to one; callers resample
inputs until the margin clears a threshold.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tape, Tensor, backward

__all__ = ["finite_diff_check", "kink_margin", "smooth_point"]

KINK_THRESHOLD = 1e-2


def finite_diff_check(function, point, step: float = 1e-3) -> float:
    """Max over coordinates of |g_auto - g_fd| / max(1, |g_fd|).

    ``function`` maps one Tensor to a scalar Tensor and must be
    deterministic. The check runs in float64; build any parameters the
    function closes over in float64 as well.
    """
    base = point.data if isinstance(point, Tensor) else np.asarray(point)
    base = base.astype(np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    with Tape():
        out = function(probe)
    if out.data.size != 1:
        raise ValueError(f"finite_diff_check needs a scalar-valued function, got shape {out.data.shape}")
    backward(out)
    g_auto = probe.grad.reshape(-1)

    g_fd = np.empty(base.size, dtype=np.float64)
    flat = base.reshape(-1)
    for i in range(base.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + step
        f_plus = float(function(Tensor(bumped.reshape(base.shape))).data)
        bumped[i] = flat[i] - step
        f_minus = float(function(Tensor(bumped.reshape(base.shape))).data)
        g_fd[i] = (f_plus - f_minus) / (2.0 * step)

    return float(np.max(np.abs(g_auto - g_fd) / np.maximum(1.0, np.abs(g_fd))))


def _top_two_gap(values: np.ndarray, axis: int = -1) -> float:
    """Smallest (max - runner-up) over the reduction groups along ``axis``."""
    if values.shape[axis] < 2:
        return float("inf")
    top2 = np.partition(values, -2, axis=axis)
    top2 = np.moveaxis(top2, axis, -1)[..., -2:]
    return float((top2[..., 1] - top2[..., 0]).min())


def kink_margin(tape: Tape) -> float:
    """Distance from the recorded forward pass to the nearest kink.

    Scans relu inputs for small |pre-activation| and max-style reductions
    for near-tied windows; returns the smallest margin seen (inf for a
    tape with no piecewise-linear ops).
    """
    margin = float("inf")
    for rec in tape.records:
        if rec.op == "relu":
            d = rec.inputs[0].data
            if d.size:
                margin = min(margin, float(np.abs(d).min()))
        elif rec.op == "amax":
            margin = min(margin, _top_two_gap(rec.inputs[0].data, rec.ctx["axis"]))
        elif rec.op == "max_pool2d":
            w, s = rec.ctx["window"], rec.ctx["stride"]
            win = sliding_window_view(rec.inputs[0].data, (w, w), axis=(2, 3))[:, :, ::s, ::s]
            margin = min(margin, _top_two_gap(win.reshape(*win.shape[:4], w * w)))
        elif rec.op == "global_pool" and rec.ctx["mode"] == "max":
            d = rec.inputs[0].data
            margin = min(margin, _top_two_gap(d.reshape(d.shape[0], d.shape[1], -1)))
    return margin


def smooth_point(function, sampler, threshold: float = KINK_THRESHOLD, max_tries: int = 64) -> np.ndarray:
    """Draw from ``sampler`` until ``function`` evaluates with every relu
    and max comfortably away from a tie, then return that point."""
    for _ in range(max_tries):
        candidate = np.asarray(sampler(), dtype=np.float64)
        with Tape() as tape:
            function(Tensor(candidate, requires_grad=True))
        if kink_margin(tape) >= threshold:
            return candidate
    raise RuntimeError(f"no kink-free point found in {max_tries} draws (threshold {threshold})")
