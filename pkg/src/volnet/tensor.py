"""Dense tensor values and the small shape algebra the layers build on.

Tensors are plain numpy arrays in row-major layout, 32-bit floats by
default. Activations use a channel-major layout: ``[C, D, H, W]`` for a
single volume and ``[N, C, D, H, W]`` for a batch. The gradient-check
harness may run every code path at 64-bit by passing ``dtype=np.float64``
to the creation helpers; all operations preserve the dtype of their
inputs.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import CropOutOfBounds, InvalidAxes, InvalidShape, ShapeMismatch

DEFAULT_DTYPE = np.float32

Tensor = np.ndarray


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise InvalidShape("shape must have at least one axis")
    if any(s < 1 for s in shape):
        raise InvalidShape(f"all extents must be >= 1, got {shape}")
    return shape


def create(shape: Sequence[int], fill_value: float = 0.0, dtype=None) -> Tensor:
    """Allocate a tensor of the given shape with every element == fill_value."""
    shape = _check_shape(shape)
    return np.full(shape, fill_value, dtype=dtype or DEFAULT_DTYPE)


def crop(t: Tensor, offset: Sequence[int], size: Sequence[int]) -> Tensor:
    """Copy the sub-tensor of extent ``size`` starting at ``offset``.

    The window must lie fully inside ``t``; element ``c`` of the result
    equals ``t[offset + c]``.
    """
    offset = tuple(int(o) for o in offset)
    size = tuple(int(s) for s in size)
    if len(offset) != t.ndim or len(size) != t.ndim:
        raise CropOutOfBounds(
            f"offset/size rank {len(offset)}/{len(size)} does not match tensor rank {t.ndim}"
        )
    if any(s < 1 for s in size):
        raise CropOutOfBounds(f"crop size must be >= 1 per axis, got {size}")
    for axis, (o, s, extent) in enumerate(zip(offset, size, t.shape)):
        if o < 0 or o + s > extent:
            raise CropOutOfBounds(
                f"axis {axis}: window [{o}, {o + s}) outside extent {extent}"
            )
    slices = tuple(slice(o, o + s) for o, s in zip(offset, size))
    return t[slices].copy()


def concat_channels(ts: Iterable[Tensor]) -> Tensor:
    """Concatenate tensors along axis 0 (the channel axis of [C, D, H, W])."""
    ts = list(ts)
    if not ts:
        raise ShapeMismatch("need at least one tensor to concatenate")
    first = ts[0]
    for t in ts[1:]:
        if t.ndim != first.ndim or t.shape[1:] != first.shape[1:]:
            raise ShapeMismatch(
                f"non-channel extents differ: {first.shape} vs {t.shape}"
            )
    if len(ts) == 1:
        return first.copy()
    return np.concatenate(ts, axis=0)


def reduce_moments(t: Tensor, axes: Sequence[int]) -> tuple[Tensor, Tensor]:
    """Mean and biased variance over ``axes``, keeping the remaining axes."""
    axes = tuple(sorted({int(a) for a in axes}))
    if not axes:
        raise InvalidAxes("reduction axis set must be non-empty")
    if any(a < 0 or a >= t.ndim for a in axes):
        raise InvalidAxes(f"axes {axes} out of range for rank-{t.ndim} tensor")
    mean = t.mean(axis=axes)
    var = t.var(axis=axes)  # biased: divides by the element count
    return mean, var
