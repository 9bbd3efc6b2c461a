"""Forward and backward passes for every layer kind the networks use.

Convolution means cross-correlation (no kernel flip) in the usual
deep-learning convention. 'same' padding follows the ceil rule: the
output spatial extent is ``ceil(in / stride)``.

Single volumes are ``[C, D, H, W]``. Internally the batched kernels use
a channel-major batch layout ``[C, N, D, H, W]`` (suffix ``_cm``): with
channels leading, im2col turns into contiguous slice copies, 1x1x1
convolutions collapse into plain matrix products on views, and GEMM
outputs land directly in the next layer's layout. The batched
batch-norm entry point keeps the conventional ``[N, C, D, H, W]``
signature and adapts via views.

Backward passes return gradients of a scalar loss under the forward
definitions and are verified against central finite differences by the
test suite; nothing assumes a dtype, so the same code runs at 32-bit
(production) and 64-bit (gradient-check harness).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateBatch,
    InvalidConfig,
    InvalidTarget,
    NumericError,
    ShapeMismatch,
)

PROB_FLOOR = 1e-12  # cross-entropy clamp keeping the loss finite
BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class ConvParams:
    """3D convolution parameters: weights [C_out, C_in, k, k, k], bias [C_out]."""

    weights: np.ndarray
    bias: np.ndarray


@dataclass
class ConvGrads:
    weights: np.ndarray
    bias: np.ndarray


@dataclass
class BatchNormParams:
    """Per-channel affine parameters plus non-trainable running statistics."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray


@dataclass
class BatchNormGrads:
    gamma: np.ndarray
    beta: np.ndarray


@dataclass
class DenseParams:
    """Fully-connected parameters: weights [F_out, F_in], bias [F_out]."""

    weights: np.ndarray
    bias: np.ndarray


@dataclass
class DenseGrads:
    weights: np.ndarray
    bias: np.ndarray


# ---------------------------------------------------------------------------
# padding helpers
# ---------------------------------------------------------------------------

def _same_pads(extent: int, k: int, stride: int) -> tuple[int, int]:
    """Front/back padding so the output extent is ceil(extent / stride)."""
    out = -(-extent // stride)
    total = max((out - 1) * stride + k - extent, 0)
    front = total // 2
    return front, total - front


def _resolve_pads(shape_spatial, k: int, stride: int, padding: str):
    if padding == "same":
        return [_same_pads(d, k, stride) for d in shape_spatial]
    if padding == "valid":
        for d in shape_spatial:
            if d < k:
                raise ShapeMismatch(
                    f"window of size {k} does not fit extent {d} with valid padding"
                )
        return [(0, 0) for _ in shape_spatial]
    raise InvalidConfig(f"padding must be 'same' or 'valid', got {padding!r}")


def _out_extent(extent: int, k: int, stride: int, pads: tuple[int, int]) -> int:
    return (extent + pads[0] + pads[1] - k) // stride + 1


def _window_cols_cm(x: np.ndarray, k: int, stride: int, pads) -> tuple[np.ndarray, tuple]:
    """im2col over [C, N, D, H, W]: columns [C * k^3, N * P] plus output dims.

    Row order is (channel, kz, ky, kx), matching a reshaped
    [C_out, C_in * k^3] weight matrix. Each of the k^3 fills is a plain
    slice copy; a padding-free 1x1x1 stride-1 window is a zero-copy
    reshape.
    """
    c, n = x.shape[:2]
    out_sp = tuple(_out_extent(d, k, stride, p) for d, p in zip(x.shape[2:], pads))
    if k == 1 and stride == 1 and all(p == (0, 0) for p in pads):
        return x.reshape(c, -1), out_sp
    xp = np.pad(x, [(0, 0), (0, 0)] + list(pads))
    od, oh, ow = out_sp
    cols = np.empty((c, k, k, k, n, od, oh, ow), dtype=x.dtype)
    for dz in range(k):
        for dy in range(k):
            for dx in range(k):
                cols[:, dz, dy, dx] = xp[
                    :,
                    :,
                    dz : dz + (od - 1) * stride + 1 : stride,
                    dy : dy + (oh - 1) * stride + 1 : stride,
                    dx : dx + (ow - 1) * stride + 1 : stride,
                ]
    return cols.reshape(c * k**3, n * od * oh * ow), out_sp


# ---------------------------------------------------------------------------
# 3D convolution
# ---------------------------------------------------------------------------

def _check_conv_args(x_cm: np.ndarray, params: ConvParams, stride: int) -> int:
    if x_cm.ndim != 5:
        raise ShapeMismatch(f"expected a 5-axis batch, got shape {x_cm.shape}")
    w = params.weights
    if w.ndim != 5 or not (w.shape[2] == w.shape[3] == w.shape[4]):
        raise ShapeMismatch(f"weights must be [C_out, C_in, k, k, k], got {w.shape}")
    if w.shape[1] != x_cm.shape[0]:
        raise ShapeMismatch(
            f"input has {x_cm.shape[0]} channels but weights expect {w.shape[1]}"
        )
    if params.bias.shape != (w.shape[0],):
        raise ShapeMismatch(f"bias shape {params.bias.shape} != ({w.shape[0]},)")
    if stride < 1:
        raise InvalidConfig(f"stride must be >= 1, got {stride}")
    return w.shape[2]


def conv3d_forward_cm(
    x: np.ndarray, params: ConvParams, padding: str = "same", stride: int = 1
) -> np.ndarray:
    """Cross-correlation plus bias on a channel-major batch [C_in, N, D, H, W]."""
    k = _check_conv_args(x, params, stride)
    pads = _resolve_pads(x.shape[2:], k, stride, padding)
    n = x.shape[1]
    c_out = params.weights.shape[0]
    cols, (od, oh, ow) = _window_cols_cm(x, k, stride, pads)
    y = params.weights.reshape(c_out, -1) @ cols
    y += params.bias[:, None]
    return y.reshape(c_out, n, od, oh, ow)


def conv3d_backward_cm(
    x: np.ndarray,
    params: ConvParams,
    upstream: np.ndarray,
    padding: str = "same",
    stride: int = 1,
    need_input_grad: bool = True,
) -> tuple[np.ndarray | None, ConvGrads]:
    k = _check_conv_args(x, params, stride)
    pads = _resolve_pads(x.shape[2:], k, stride, padding)
    out_sp = tuple(_out_extent(d, k, stride, p) for d, p in zip(x.shape[2:], pads))
    c_out = params.weights.shape[0]
    c_in, n = x.shape[:2]
    if upstream.shape != (c_out, n) + out_sp:
        raise ShapeMismatch(
            f"upstream shape {upstream.shape} != {(c_out, n) + out_sp}"
        )

    um = upstream.reshape(c_out, -1)
    cols, _ = _window_cols_cm(x, k, stride, pads)
    grad_w = (um @ cols.T).reshape(params.weights.shape)
    grad_b = upstream.sum(axis=(1, 2, 3, 4))
    if not need_input_grad:  # entry layers: nothing upstream wants dL/dx
        return None, ConvGrads(weights=grad_w, bias=grad_b)

    # grad wrt input: dilate the upstream by the stride, pad so that a
    # correlation with the flipped kernels reproduces the padded-input
    # extents, then correlate and strip the forward padding.
    padded_sp = [d + p[0] + p[1] for d, p in zip(x.shape[2:], pads)]
    up_dil = upstream
    if stride > 1:
        dil_shape = [c_out, n] + [(o - 1) * stride + 1 for o in out_sp]
        up_dil = np.zeros(dil_shape, dtype=upstream.dtype)
        up_dil[:, :, ::stride, ::stride, ::stride] = upstream
    rem = [
        ps - ((o - 1) * stride + k) for ps, o in zip(padded_sp, out_sp)
    ]  # slack the strided window walk never reached, in [0, stride)
    back_pads = [(k - 1, k - 1 + r) for r in rem]
    cols_up, _ = _window_cols_cm(up_dil, k, 1, back_pads)
    w_flip = params.weights[:, :, ::-1, ::-1, ::-1]
    wb = np.ascontiguousarray(w_flip.transpose(1, 0, 2, 3, 4)).reshape(c_in, -1)
    gx = (wb @ cols_up).reshape(c_in, n, *padded_sp)
    slices = tuple(slice(p[0], ps - p[1]) for p, ps in zip(pads, padded_sp))
    grad_x = np.ascontiguousarray(gx[(slice(None), slice(None)) + slices])
    return grad_x, ConvGrads(weights=grad_w, bias=grad_b)


def conv3d_forward(
    x: np.ndarray, params: ConvParams, padding: str = "same", stride: int = 1
) -> np.ndarray:
    """Cross-correlate a single volume [C_in, D, H, W] with the filter bank."""
    if x.ndim != 4:
        raise ShapeMismatch(f"expected [C, D, H, W] input, got shape {x.shape}")
    return conv3d_forward_cm(x[:, None], params, padding, stride)[:, 0]


def conv3d_backward(
    x: np.ndarray,
    params: ConvParams,
    upstream: np.ndarray,
    padding: str = "same",
    stride: int = 1,
) -> tuple[np.ndarray, ConvGrads]:
    if x.ndim != 4:
        raise ShapeMismatch(f"expected [C, D, H, W] input, got shape {x.shape}")
    if upstream.ndim != 4:
        raise ShapeMismatch(f"expected [C, D, H, W] upstream, got {upstream.shape}")
    grad_x, grads = conv3d_backward_cm(
        x[:, None], params, upstream[:, None], padding, stride
    )
    return grad_x[:, 0], grads


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

def _bn_forward(x, params, mode, momentum, epsilon, channel_axis):
    c = x.shape[channel_axis]
    if params.gamma.shape != (c,):
        raise ShapeMismatch(f"gamma shape {params.gamma.shape} != ({c},)")
    axes = tuple(i for i in range(x.ndim) if i != channel_axis)
    bshape = [1] * x.ndim
    bshape[channel_axis] = c
    bshape = tuple(bshape)
    if mode == "train":
        if x.size // c < 2:
            raise DegenerateBatch(
                "train-mode batch norm needs at least 2 elements per channel"
            )
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)  # biased
        params.running_mean *= 1.0 - momentum
        params.running_mean += momentum * mean.astype(params.running_mean.dtype)
        params.running_var *= 1.0 - momentum
        params.running_var += momentum * var.astype(params.running_var.dtype)
    elif mode == "infer":
        mean = params.running_mean.astype(x.dtype)
        var = params.running_var.astype(x.dtype)
    else:
        raise InvalidConfig(f"mode must be 'train' or 'infer', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + epsilon)
    xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
    y = params.gamma.reshape(bshape) * xhat + params.beta.reshape(bshape)
    cache = {
        "xhat": xhat,
        "inv_std": inv_std,
        "gamma": params.gamma,
        "mode": mode,
        "axis": channel_axis,
    }
    return y.astype(x.dtype, copy=False), cache


def _bn_backward(cache, upstream):
    xhat = cache["xhat"]
    if upstream.shape != xhat.shape:
        raise ShapeMismatch(f"upstream shape {upstream.shape} != {xhat.shape}")
    channel_axis = cache["axis"]
    axes = tuple(i for i in range(xhat.ndim) if i != channel_axis)
    bshape = [1] * xhat.ndim
    bshape[channel_axis] = xhat.shape[channel_axis]
    bshape = tuple(bshape)
    grad_gamma = (upstream * xhat).sum(axis=axes)
    grad_beta = upstream.sum(axis=axes)
    dxhat = upstream * cache["gamma"].reshape(bshape)
    inv_std = cache["inv_std"].reshape(bshape)
    if cache["mode"] == "infer":
        # running statistics are constants w.r.t. the input
        return dxhat * inv_std, BatchNormGrads(grad_gamma, grad_beta)
    m = xhat.size // xhat.shape[channel_axis]
    sum_d = dxhat.sum(axis=axes).reshape(bshape)
    sum_dx = (dxhat * xhat).sum(axis=axes).reshape(bshape)
    grad_x = (inv_std / m) * (m * dxhat - sum_d - xhat * sum_dx)
    return grad_x, BatchNormGrads(grad_gamma, grad_beta)


def batchnorm3d_forward(
    x: np.ndarray,
    params: BatchNormParams,
    mode: str,
    momentum: float = BN_MOMENTUM,
    epsilon: float = BN_EPSILON,
) -> tuple[np.ndarray, dict]:
    """Normalize a [N, C, ...] batch per channel, scale by gamma, shift by beta.

    Train mode uses biased batch statistics and updates the running
    statistics in place: ``running <- (1 - momentum) * running +
    momentum * batch_stat``. Infer mode normalizes with the running
    statistics and leaves them untouched.
    """
    if x.ndim < 2:
        raise ShapeMismatch(f"expected [N, C, ...] input, got shape {x.shape}")
    return _bn_forward(x, params, mode, momentum, epsilon, channel_axis=1)


def batchnorm3d_backward(cache: dict, upstream: np.ndarray):
    return _bn_backward(cache, upstream)


def batchnorm3d_forward_cm(
    x: np.ndarray,
    params: BatchNormParams,
    mode: str,
    momentum: float = BN_MOMENTUM,
    epsilon: float = BN_EPSILON,
) -> tuple[np.ndarray, dict]:
    """Batch norm over the channel-major layout [C, N, D, H, W]."""
    if x.ndim < 2:
        raise ShapeMismatch(f"expected [C, N, ...] input, got shape {x.shape}")
    return _bn_forward(x, params, mode, momentum, epsilon, channel_axis=0)


def batchnorm3d_backward_cm(cache: dict, upstream: np.ndarray):
    return _bn_backward(cache, upstream)


# ---------------------------------------------------------------------------
# elementwise activations
# ---------------------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Pass upstream where x > 0; subgradient 0 at the kink."""
    if upstream.shape != x.shape:
        raise ShapeMismatch(f"upstream shape {upstream.shape} != {x.shape}")
    return np.where(x > 0, upstream, 0)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def maxpool3d_forward_cm(
    x: np.ndarray, pool: int, stride: int, padding: str = "same"
) -> tuple[np.ndarray, dict]:
    """Window maximum over [C, N, D, H, W]; cache records argmax for backward."""
    if x.ndim != 5:
        raise ShapeMismatch(f"expected a 5-axis batch, got shape {x.shape}")
    if pool < 1 or stride < 1:
        raise InvalidConfig(f"pool and stride must be >= 1, got {pool}, {stride}")
    pads = _resolve_pads(x.shape[2:], pool, stride, padding)
    c, n = x.shape[:2]
    xp = np.pad(x, [(0, 0), (0, 0)] + list(pads), constant_values=-np.inf)
    od, oh, ow = (_out_extent(d, pool, stride, p) for d, p in zip(x.shape[2:], pads))
    arg_dtype = np.int8 if pool**3 <= 127 else np.int32
    argmax = np.zeros((c, n, od, oh, ow), dtype=arg_dtype)
    better = np.empty((c, n, od, oh, ow), dtype=bool)
    y = None
    # running max over the pool^3 window offsets in row-major order;
    # strict comparison keeps the first occurrence on ties
    idx = 0
    for dz in range(pool):
        for dy in range(pool):
            for dx in range(pool):
                cand = xp[
                    :,
                    :,
                    dz : dz + (od - 1) * stride + 1 : stride,
                    dy : dy + (oh - 1) * stride + 1 : stride,
                    dx : dx + (ow - 1) * stride + 1 : stride,
                ]
                if y is None:
                    y = np.ascontiguousarray(cand)
                else:
                    np.greater(cand, y, out=better)
                    np.copyto(y, cand, where=better)
                    np.copyto(argmax, arg_dtype(idx), where=better)
                idx += 1
    cache = {
        "argmax": argmax,
        "pads": pads,
        "pool": pool,
        "stride": stride,
        "x_shape": x.shape,
        "padded_shape": xp.shape,
    }
    return y, cache


def maxpool3d_backward_cm(cache: dict, upstream: np.ndarray) -> np.ndarray:
    argmax = cache["argmax"]
    if upstream.shape != argmax.shape:
        raise ShapeMismatch(f"upstream shape {upstream.shape} != {argmax.shape}")
    pool, stride = cache["pool"], cache["stride"]
    c, n, pd, ph, pw = cache["padded_shape"]
    od, oh, ow = argmax.shape[2:]
    dz, rem = np.divmod(argmax, pool * pool)
    dy, dx = np.divmod(rem, pool)
    oz = np.arange(od).reshape(1, 1, od, 1, 1) * stride + dz
    oy = np.arange(oh).reshape(1, 1, 1, oh, 1) * stride + dy
    ox = np.arange(ow).reshape(1, 1, 1, 1, ow) * stride + dx
    chan = np.arange(c).reshape(c, 1, 1, 1, 1)
    batch = np.arange(n).reshape(1, n, 1, 1, 1)
    flat_idx = (((chan * n + batch) * pd + oz) * ph + oy) * pw + ox
    grad_padded = np.zeros(c * n * pd * ph * pw, dtype=upstream.dtype)
    np.add.at(grad_padded, flat_idx.ravel(), upstream.ravel())
    grad_padded = grad_padded.reshape(c, n, pd, ph, pw)
    pads = cache["pads"]
    slices = tuple(slice(p[0], p[0] + d) for p, d in zip(pads, cache["x_shape"][2:]))
    return np.ascontiguousarray(grad_padded[(slice(None), slice(None)) + slices])


def maxpool3d(
    x: np.ndarray, pool: int, stride: int, padding: str = "same"
) -> tuple[np.ndarray, dict]:
    """Window maximum of one volume [C, D, H, W] plus the backward cache."""
    if x.ndim != 4:
        raise ShapeMismatch(f"expected [C, D, H, W] input, got shape {x.shape}")
    y, cache = maxpool3d_forward_cm(x[:, None], pool, stride, padding)
    return y[:, 0], cache


def maxpool3d_backward(cache: dict, upstream: np.ndarray) -> np.ndarray:
    if upstream.ndim == 4:
        return maxpool3d_backward_cm(cache, upstream[:, None])[:, 0]
    return maxpool3d_backward_cm(cache, upstream)


def avgpool3d_global_cm(x: np.ndarray) -> np.ndarray:
    """Per-channel spatial mean over [C, N, D, H, W] -> [C, N]."""
    if x.ndim != 5:
        raise ShapeMismatch(f"expected a 5-axis batch, got shape {x.shape}")
    return x.mean(axis=(2, 3, 4))


def avgpool3d_global_backward_cm(x_shape: tuple, upstream: np.ndarray) -> np.ndarray:
    c, n, d, h, w = x_shape
    if upstream.shape != (c, n):
        raise ShapeMismatch(f"upstream shape {upstream.shape} != {(c, n)}")
    scale = 1.0 / (d * h * w)
    return np.broadcast_to(
        (upstream * scale)[:, :, None, None, None], x_shape
    ).astype(upstream.dtype, copy=True)


def avgpool3d_global(x: np.ndarray) -> np.ndarray:
    """Mean over all spatial positions per channel: [C, D, H, W] -> [C]."""
    if x.ndim != 4:
        raise ShapeMismatch(f"expected [C, D, H, W] input, got shape {x.shape}")
    return avgpool3d_global_cm(x[:, None])[:, 0]


def avgpool3d_global_backward(x_shape: tuple, upstream: np.ndarray) -> np.ndarray:
    c, d, h, w = x_shape
    return avgpool3d_global_backward_cm((c, 1, d, h, w), upstream[:, None])[:, 0]


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------

def dropout(
    x: np.ndarray, keep_prob: float, mode: str, rng: np.random.Generator | None = None
) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverted dropout: train mode zeroes elements and rescales survivors.

    Returns the output and the mask (None in infer mode); backward reuses
    the mask so the dropped coordinates stay consistent.
    """
    if not 0.0 < keep_prob <= 1.0:
        raise InvalidConfig(f"keep_prob must be in (0, 1], got {keep_prob}")
    if mode == "infer":
        return x, None
    if mode != "train":
        raise InvalidConfig(f"mode must be 'train' or 'infer', got {mode!r}")
    if keep_prob == 1.0:
        return x, np.ones_like(x, dtype=bool)
    if rng is None:
        raise InvalidConfig("train-mode dropout needs an rng")
    mask = rng.random(x.shape) < keep_prob
    return (x * mask) / np.asarray(keep_prob, dtype=x.dtype), mask


def dropout_backward(
    mask: np.ndarray | None, keep_prob: float, upstream: np.ndarray
) -> np.ndarray:
    if mask is None:  # infer mode was the identity
        return upstream
    return (upstream * mask) / np.asarray(keep_prob, dtype=upstream.dtype)


# ---------------------------------------------------------------------------
# dense / softmax / cross-entropy
# ---------------------------------------------------------------------------

def dense_forward(x: np.ndarray, params: DenseParams) -> np.ndarray:
    """weights @ x + bias for a feature vector [F_in] or batch [N, F_in]."""
    w, b = params.weights, params.bias
    if w.ndim != 2 or b.shape != (w.shape[0],):
        raise ShapeMismatch(f"bad dense parameter shapes {w.shape}, {b.shape}")
    if x.shape[-1] != w.shape[1]:
        raise ShapeMismatch(f"input features {x.shape[-1]} != {w.shape[1]}")
    return x @ w.T + b


def dense_backward(
    x: np.ndarray, params: DenseParams, upstream: np.ndarray
) -> tuple[np.ndarray, DenseGrads]:
    w = params.weights
    if upstream.shape[-1] != w.shape[0] or upstream.shape[:-1] != x.shape[:-1]:
        raise ShapeMismatch(
            f"upstream shape {upstream.shape} incompatible with {x.shape} @ {w.shape}"
        )
    if x.ndim == 1:
        grad_w = np.outer(upstream, x)
        grad_b = upstream.copy()
    else:
        grad_w = upstream.T @ x
        grad_b = upstream.sum(axis=0)
    grad_x = upstream @ w
    return grad_x, DenseGrads(weights=grad_w, bias=grad_b)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Exp-normalize over the last axis with max-subtraction for stability."""
    if logits.shape[-1] < 2:
        raise ShapeMismatch("softmax needs at least two classes")
    if not np.all(np.isfinite(logits)):
        raise NumericError("softmax received non-finite logits")
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_one_hot(target: np.ndarray) -> None:
    ok = np.all((target == 0) | (target == 1)) and np.all(target.sum(axis=-1) == 1)
    if not ok:
        raise InvalidTarget("target must be one-hot")


def cross_entropy(
    probabilities: np.ndarray, one_hot_target: np.ndarray
) -> tuple[float, np.ndarray]:
    """Categorical cross-entropy of softmax outputs against a one-hot target.

    Returns ``(-log p_target, probabilities - target)``; the gradient is
    taken w.r.t. the logits that produced the probabilities, so the
    softmax Jacobian is already folded in. Batched inputs give the mean
    loss and correspondingly scaled gradients.
    """
    if probabilities.shape != one_hot_target.shape:
        raise ShapeMismatch(
            f"shapes differ: {probabilities.shape} vs {one_hot_target.shape}"
        )
    _check_one_hot(one_hot_target)
    p_target = (probabilities * one_hot_target).sum(axis=-1)
    loss = -np.log(np.maximum(p_target, PROB_FLOOR))
    grad_logits = probabilities - one_hot_target
    if probabilities.ndim == 1:
        return float(loss), grad_logits
    n = probabilities.shape[0]
    return float(loss.mean()), grad_logits / n


def softmax_cross_entropy(
    logits: np.ndarray, one_hot_target: np.ndarray
) -> tuple[float, np.ndarray]:
    """Fused helper: loss and d(loss)/d(logits) in one call."""
    return cross_entropy(softmax(logits), one_hot_target)


def accuracy_from_probs(probs: np.ndarray, one_hot_target: np.ndarray) -> float:
    pred = probs.argmax(axis=-1)
    true = one_hot_target.argmax(axis=-1)
    return float((pred == true).mean())


def check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {name}")
