from itertools import product
from typing import Optional, Sequence, Tuple

import numpy as np

from cbct_toxicity.interpolation import TrilinearSampler, identity_grid
from cbct_toxicity.nn.tensor import ShapeError, Tensor, as_tensor

SPATIAL_AXES = (2, 3, 4)


def _triple(value) -> Tuple[int, int, int]:
    if isinstance(value, int):
        return (value, value, value)
    value = tuple(int(v) for v in value)
    if len(value) != 3:
        raise ValueError(f"Expected 3 values, got {value}")
    return value


def _pad_spatial(data: np.ndarray, padding: Tuple[int, int, int], value: float = 0.0):
    if not any(padding):
        return data
    widths = [(0, 0), (0, 0)] + [(p, p) for p in padding]
    return np.pad(data, widths, mode="constant", constant_values=value)


def _unpad_spatial(data: np.ndarray, padding: Tuple[int, int, int]) -> np.ndarray:
    slices = [slice(None), slice(None)]
    slices += [slice(p, data.shape[2 + i] - p) for i, p in enumerate(padding)]
    return data[tuple(slices)]


def _output_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _window(offset: Sequence[int], out_shape: Sequence[int], stride: Tuple[int, int, int]):
    return (slice(None), slice(None)) + tuple(
        slice(o, o + s * (n - 1) + 1, s) for o, n, s in zip(offset, out_shape, stride)
    )


def conv3d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride=1,
    padding=0,
) -> Tensor:
    """Cross-correlation of ``(N, C_in, D, H, W)`` with ``(C_out, C_in, kd, kh, kw)``."""
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d expects 5D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"Input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"Bias shape {bias.shape} does not match {weight.shape[0]} outputs")
    stride, padding = _triple(stride), _triple(padding)
    if min(stride) < 1:
        raise ValueError(f"Stride must be >= 1, got {stride}")
    kernel = weight.shape[2:]
    out_shape = tuple(
        _output_extent(n, k, s, p) for n, k, s, p in zip(x.shape[2:], kernel, stride, padding)
    )
    if min(out_shape) < 1:
        raise ShapeError(f"Kernel {kernel} does not fit input {x.shape[2:]} with padding {padding}")

    xp = _pad_spatial(x.data, padding)
    w = weight.data
    offsets = list(product(*(range(k) for k in kernel)))
    # accumulate channels-last, one tensordot per kernel tap
    acc = np.zeros((x.shape[0],) + out_shape + (w.shape[0],), dtype=np.result_type(xp, w))
    for offset in offsets:
        slab = xp[_window(offset, out_shape, stride)]
        acc += np.tensordot(slab, w[(slice(None), slice(None)) + offset], axes=([1], [1]))
    out = np.moveaxis(acc, -1, 1)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1, 1)

    def backward(g):
        grad_x = grad_w = grad_b = None
        if x.requires_grad:
            grad_xp = np.zeros_like(xp)
            for offset in offsets:
                contribution = np.tensordot(
                    g, w[(slice(None), slice(None)) + offset], axes=([1], [0])
                )
                grad_xp[_window(offset, out_shape, stride)] += np.moveaxis(contribution, -1, 1)
            grad_x = _unpad_spatial(grad_xp, padding)
        if weight.requires_grad:
            grad_w = np.zeros_like(w)
            for offset in offsets:
                slab = xp[_window(offset, out_shape, stride)]
                grad_w[(slice(None), slice(None)) + offset] = np.tensordot(
                    g, slab, axes=([0, 2, 3, 4], [0, 2, 3, 4])
                )
        if bias is not None and bias.requires_grad:
            grad_b = g.sum(axis=(0, 2, 3, 4))
        return (grad_x, grad_w, grad_b) if bias is not None else (grad_x, grad_w)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor.from_op(out, parents, backward, "conv3d")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped ``(out, in)``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear cannot map {x.shape} with weight {weight.shape}")
    out = x @ weight.transpose()
    return out + bias if bias is not None else out


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0
    return Tensor.from_op(x.data * positive, (x,), lambda g: (g * positive,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    positive = x.data > 0
    scale = np.where(positive, 1.0, slope).astype(x.dtype)
    return Tensor.from_op(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Normalizes channel axis 1 of ``(N, C)`` or ``(N, C, D, H, W)`` input.

    Training mode updates the running buffers in place. A training batch with a
    single value per channel has no batch variance, so it is normalized with the
    running moments and leaves the buffers untouched.
    """
    if x.ndim not in (2, 5):
        raise ShapeError(f"batch_norm expects 2D or 5D input, got {x.shape}")
    axes = (0,) if x.ndim == 2 else (0,) + SPATIAL_AXES
    shape = (1, -1) + (1,) * (x.ndim - 2)
    count = x.size // x.shape[1]
    if training and count > 1:
        mean = x.mean(axis=axes, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=axes, keepdims=True)
        normalized = centered / (var + eps).sqrt()
        running_mean[...] = (1 - momentum) * running_mean + momentum * mean.data.reshape(-1)
        running_var[...] = (1 - momentum) * running_var + momentum * var.data.reshape(
            -1
        ) * count / (count - 1)
    else:
        inv_std = 1.0 / np.sqrt(running_var.reshape(shape) + eps)
        normalized = (x - running_mean.reshape(shape).astype(x.dtype)) * inv_std.astype(x.dtype)
    return normalized * gamma.reshape(shape) + beta.reshape(shape)


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"Dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * keep


def max_pool3d(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    if x.ndim != 5:
        raise ShapeError(f"max_pool3d expects 5D input, got {x.shape}")
    kernel3, stride3, padding3 = _triple(kernel), _triple(stride), _triple(padding)
    out_shape = tuple(
        _output_extent(n, k, s, p)
        for n, k, s, p in zip(x.shape[2:], kernel3, stride3, padding3)
    )
    if min(out_shape) < 1:
        raise ShapeError(f"Pooling window does not fit input {x.shape[2:]}")
    xp = _pad_spatial(x.data, padding3, value=-np.inf)
    offsets = list(product(*(range(k) for k in kernel3)))
    best = None
    winner = None
    for index, offset in enumerate(offsets):
        slab = xp[_window(offset, out_shape, stride3)]
        if best is None:
            best = slab.copy()
            winner = np.zeros(slab.shape, dtype=np.int64)
        else:
            better = slab > best
            best = np.where(better, slab, best)
            winner[better] = index

    def backward(g):
        grad_xp = np.zeros_like(xp)
        for index, offset in enumerate(offsets):
            grad_xp[_window(offset, out_shape, stride3)] += g * (winner == index)
        return (_unpad_spatial(grad_xp, padding3),)

    return Tensor.from_op(best, (x,), backward, "max_pool3d")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    if x.ndim != 5:
        raise ShapeError(f"upsample_nearest expects 5D input, got {x.shape}")
    out = x.data
    for axis in SPATIAL_AXES:
        out = np.repeat(out, factor, axis=axis)
    n, c, d, h, w = x.shape

    def backward(g):
        return (g.reshape(n, c, d, factor, h, factor, w, factor).sum(axis=(3, 5, 7)),)

    return Tensor.from_op(out, (x,), backward, "upsample_nearest")


def global_avg_pool(x: Tensor) -> Tensor:
    """``(N, C, D, H, W)`` to ``(N, C)``."""
    if x.ndim != 5:
        raise ShapeError(f"global_avg_pool expects 5D input, got {x.shape}")
    return x.mean(axis=SPATIAL_AXES)


def spatial_transform(image: Tensor, coords: Tensor) -> Tensor:
    """Sample ``(N, C, D, H, W)`` images at ``(N, 3, D', H', W')`` voxel coordinates.

    Coordinates are ordered (x, y, z); sampling is trilinear with border clamping
    and differentiable in both the image and the coordinates.
    """
    if image.ndim != 5 or coords.ndim != 5 or coords.shape[1] != 3:
        raise ShapeError(f"Cannot sample {image.shape} at coordinates {coords.shape}")
    if coords.shape[0] != image.shape[0]:
        raise ShapeError(f"Batch mismatch: {image.shape[0]} images, {coords.shape[0]} grids")
    samplers = [
        TrilinearSampler(image.shape[2:], coords.data[n]) for n in range(image.shape[0])
    ]
    out = np.stack([s.sample(image.data[n]) for n, s in enumerate(samplers)]).astype(
        np.result_type(image.dtype, coords.dtype)
    )

    def backward(g):
        grad_image = grad_coords = None
        if image.requires_grad:
            grad_image = np.stack([s.scatter(g[n]) for n, s in enumerate(samplers)]).astype(
                image.dtype
            )
        if coords.requires_grad:
            grad_coords = np.stack(
                [s.coordinate_gradient(image.data[n], g[n]) for n, s in enumerate(samplers)]
            ).astype(coords.dtype)
        return (grad_image, grad_coords)

    return Tensor.from_op(out, (image, coords), backward, "spatial_transform")


def displacement_coordinates(dvf_mm: Tensor, spacing_mm: Sequence[float]) -> Tensor:
    """Voxel sampling grid ``x + u(x) / spacing`` for a ``(N, 3, D, H, W)`` field in mm."""
    spacing = np.asarray(spacing_mm, dtype=dvf_mm.dtype).reshape(1, 3, 1, 1, 1)
    grid = identity_grid(dvf_mm.shape[2:]).astype(dvf_mm.dtype)[np.newaxis]
    return dvf_mm * (1.0 / spacing) + grid


def warp_displacement(image: Tensor, dvf_mm: Tensor, spacing_mm: Sequence[float]) -> Tensor:
    """The spatial transformer: pull ``image`` back through a field in mm."""
    if image.shape[2:] != dvf_mm.shape[2:]:
        raise ShapeError(f"Image {image.shape} and field {dvf_mm.shape} grids differ")
    return spatial_transform(image, displacement_coordinates(dvf_mm, spacing_mm))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor.from_op(out, (x,), backward, "log_softmax")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return log_softmax(as_tensor(x), axis=axis).exp()
