"""Differentiable neural-network operations.

Layout conventions: activations are [N, C, H, W], conv kernels are
[K, C, kh, kw], dense weights are [D, M]. Convolution lowers the input to
a patch matrix so the heavy lifting is a single GEMM; the lowering is
staged through a channels-last copy because that moves whole channel runs
at a time.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor, as_tensor, _needs_grad, record

__all__ = [
    "conv2d",
    "dense",
    "relu",
    "sigmoid",
    "max_pool2d",
    "global_pool",
    "batch_norm2d",
    "softmax_cross_entropy",
]


def _conv_cols(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Lower a [N, C, H, W] input to a [N*Ho*Wo, kh*kw*C] patch matrix.

    Zero padding is folded into a channels-last staging copy so every move
    afterwards is a whole channel run instead of single elements; columns are
    ordered (i, j, c) to match ``_kernel_matrix``.
    """
    n, c, h, w = x.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if padding:
        xh = np.zeros((n, hp, wp, c), dtype=x.dtype)
        xh[:, padding : padding + h, padding : padding + w, :] = x.transpose(0, 2, 3, 1)
    else:
        xh = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xh[:, i : i + stride * ho : stride,
                                        j : j + stride * wo : stride, :]
    return cols.reshape(n * ho * wo, kh * kw * c)


def _kernel_matrix(weight: np.ndarray) -> np.ndarray:
    """[K, C, kh, kw] kernel as a [K, kh*kw*C] matrix matching ``_conv_cols``."""
    k, c, kh, kw = weight.shape
    return np.ascontiguousarray(weight.transpose(0, 2, 3, 1)).reshape(k, kh * kw * c)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation with square stride and zero padding."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 4:
        raise ValueError(f"conv2d expects input [N, C, H, W], got shape {x.data.shape}")
    if weight.data.ndim != 4:
        raise ValueError(f"conv2d expects kernel [K, C, kh, kw], got shape {weight.data.shape}")
    n, c, h, w = x.data.shape
    k, ck, kh, kw = weight.data.shape
    if c != ck:
        raise ValueError(
            f"conv2d channel mismatch: input has {c} channels {x.data.shape}, "
            f"kernel expects {ck} {weight.data.shape}"
        )
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (k,):
            raise ValueError(f"conv2d bias must have shape ({k},), got {bias.data.shape}")
    if not isinstance(stride, int) or stride < 1:
        raise ValueError(f"conv2d stride must be a positive integer, got {stride!r}")
    if not isinstance(padding, int) or padding < 0:
        raise ValueError(f"conv2d padding must be a non-negative integer, got {padding!r}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ValueError(
            f"conv2d kernel {kh}x{kw} exceeds padded input {hp}x{wp} "
            f"(input {h}x{w}, padding {padding})"
        )
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    cols = _conv_cols(x.data, kh, kw, stride, padding)
    wmat = _kernel_matrix(weight.data)
    out_mat = cols @ wmat.T
    if bias is not None:
        out_mat = out_mat + bias.data
    out_data = out_mat.reshape(n, ho, wo, k).transpose(0, 3, 1, 2)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    out = Tensor._result(np.ascontiguousarray(out_data), _needs_grad(*inputs))
    # The patch matrix is only worth keeping when the kernel will need a
    # gradient (training); attack passes freeze parameters and skip it.
    saved_cols = cols if (out.requires_grad and weight.requires_grad) else None

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, k)
        grad_w = None
        if weight.requires_grad and saved_cols is not None:
            grad_w = (gmat.T @ saved_cols).reshape(k, kh, kw, c).transpose(0, 3, 1, 2)
        grad_x = None
        if x.requires_grad:
            grad_cols = (gmat @ wmat).reshape(n, ho, wo, kh, kw, c)
            gh = np.zeros((n, hp, wp, c), dtype=grad_cols.dtype)
            for i in range(kh):
                for j in range(kw):
                    gh[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += (
                        grad_cols[:, :, :, i, j, :]
                    )
            if padding:
                gh = gh[:, padding : padding + h, padding : padding + w, :]
            grad_x = np.ascontiguousarray(gh.transpose(0, 3, 1, 2))
        if bias is None:
            return grad_x, grad_w
        grad_b = gmat.sum(axis=0) if bias.requires_grad else None
        return grad_x, grad_w, grad_b

    record("conv2d", inputs, out, bw, {"stride": stride, "padding": padding})
    return out


def dense(x, weight, bias=None) -> Tensor:
    """Affine map [N, D] @ [D, M] + [M]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ValueError(f"dense expects 2-d input and weight, got {x.data.shape} and {weight.data.shape}")
    if x.data.shape[1] != weight.data.shape[0]:
        raise ValueError(f"dense shape mismatch: input {x.data.shape} vs weight {weight.data.shape}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (weight.data.shape[1],):
            raise ValueError(
                f"dense bias must have shape ({weight.data.shape[1]},), got {bias.data.shape}"
            )
    out_data = x.data @ weight.data
    if bias is not None:
        out_data = out_data + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)
    out = Tensor._result(out_data, _needs_grad(*inputs))

    def bw(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0) if bias.requires_grad else None

    record("dense", inputs, out, bw)
    return out


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor._result(np.maximum(x.data, 0), _needs_grad(x))

    def bw(g):
        # Subgradient 0 at the kink itself.
        return (g * (x.data > 0),)

    record("relu", (x,), out, bw)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out_data[~pos] = ex / (1.0 + ex)
    out = Tensor._result(out_data, _needs_grad(x))

    def bw(g):
        return (g * out_data * (1.0 - out_data),)

    record("sigmoid", (x,), out, bw)
    return out


def max_pool2d(x, window: int, stride: int) -> Tensor:
    """Windowed spatial max; ties route the gradient to the first maximum
    in row-major window order."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError(f"max_pool2d expects input [N, C, H, W], got shape {x.data.shape}")
    if not isinstance(window, int) or window < 1:
        raise ValueError(f"max_pool2d window must be a positive integer, got {window!r}")
    if not isinstance(stride, int) or stride < 1:
        raise ValueError(f"max_pool2d stride must be a positive integer, got {stride!r}")
    n, c, h, w = x.data.shape
    if window > h or window > w:
        raise ValueError(f"max_pool2d window {window} exceeds spatial dims {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    win = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, ho, wo, window * window)
    idx = flat.argmax(axis=-1)
    out = Tensor._result(np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0], _needs_grad(x))

    def bw(g):
        gx = np.zeros_like(x.data)
        ni, ci, hi, wi = np.indices(idx.shape, sparse=True)
        rows = hi * stride + idx // window
        cols = wi * stride + idx % window
        np.add.at(gx, (ni, ci, rows, cols), g)
        return (gx,)

    record("max_pool2d", (x,), out, bw, {"window": window, "stride": stride})
    return out


def global_pool(x, mode: str = "avg") -> Tensor:
    """Collapse all spatial positions to [N, C, 1, 1] by mean or max."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError(f"global_pool expects input [N, C, H, W], got shape {x.data.shape}")
    if mode not in ("avg", "max"):
        raise ValueError(f"global_pool mode must be 'avg' or 'max', got {mode!r}")
    n, c, h, w = x.data.shape
    if mode == "avg":
        out = Tensor._result(x.data.mean(axis=(2, 3), keepdims=True), _needs_grad(x))

        def bw(g):
            return (np.broadcast_to(g / (h * w), x.data.shape).copy(),)

    else:
        flat = x.data.reshape(n, c, h * w)
        idx = flat.argmax(axis=-1)
        out = Tensor._result(
            np.take_along_axis(flat, idx[..., None], axis=-1).reshape(n, c, 1, 1), _needs_grad(x)
        )

        def bw(g):
            gx = np.zeros((n, c, h * w), dtype=x.data.dtype)
            np.put_along_axis(gx, idx[..., None], g.reshape(n, c, 1), axis=-1)
            return (gx.reshape(x.data.shape),)

    record("global_pool", (x,), out, bw, {"mode": mode})
    return out


def batch_norm2d(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization with affine parameters.

    In training mode the batch statistics normalize the input and the
    running buffers are updated in place with an exponential moving
    average (unbiased variance). In eval mode the running buffers
    normalize the input and nothing is mutated.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim != 4:
        raise ValueError(f"batch_norm2d expects input [N, C, H, W], got shape {x.data.shape}")
    c = x.data.shape[1]
    for name, arr in (("gamma", gamma.data), ("beta", beta.data),
                      ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise ValueError(f"batch_norm2d {name} must have shape ({c},), got {arr.shape}")
    if eps <= 0:
        raise ValueError(f"batch_norm2d eps must be positive, got {eps}")

    n, _, h, w = x.data.shape
    m = n * h * w
    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mean.reshape(1, c, 1, 1)
        var = np.mean(centered * centered, axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean = running_mean
        var = running_var
        centered = x.data - mean.reshape(1, c, 1, 1)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * invstd.reshape(1, c, 1, 1)
    out_data = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)
    out = Tensor._result(out_data, _needs_grad(x, gamma, beta))

    def bw(g):
        # gamma is constant per channel, so it factors out of the batch sums;
        # the same reductions then serve both the parameter and input grads.
        need_sums = x.requires_grad and training
        sum_gx = (g * xhat).sum(axis=(0, 2, 3)) if (gamma.requires_grad or need_sums) else None
        sum_g = g.sum(axis=(0, 2, 3)) if (beta.requires_grad or need_sums) else None
        dgamma = sum_gx if gamma.requires_grad else None
        dbeta = sum_g if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            gs = (gamma.data * invstd).reshape(1, c, 1, 1)
            if training:
                dx = gs / m * (m * g - sum_g.reshape(1, c, 1, 1)
                               - xhat * sum_gx.reshape(1, c, 1, 1))
            else:
                dx = g * gs
        return dx, dgamma, dbeta

    record("batch_norm2d", (x, gamma, beta), out, bw, {"training": training})
    return out


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy between softmax(logits) and integer labels.

    Computed through a shifted log-sum-exp so large logits stay finite.
    """
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise ValueError(f"softmax_cross_entropy expects logits [N, K], got shape {logits.data.shape}")
    n, k = logits.data.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"labels must have shape ({n},), got {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"labels must be integers, got dtype {labels.dtype}")
    bad = np.nonzero((labels < 0) | (labels >= k))[0]
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"label {int(labels[i])} at index {i} outside [0, {k})")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = -logp[np.arange(n), labels].mean()
    out = Tensor._result(np.asarray(loss, dtype=logits.data.dtype), _needs_grad(logits))

    def bw(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        return (grad * (g / n),)

    record("softmax_cross_entropy", (logits,), out, bw)
    return out
