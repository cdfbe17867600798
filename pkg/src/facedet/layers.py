"""Dense-prediction building blocks with hand-written backward passes.

Every forward returns (output, cache); the matching backward consumes the
upstream gradient plus that cache and returns gradients for each input.
Feature maps are channels-last (H, W, C) float64; fully-connected activations
are (batch, features).

Convolutions are 3x3-or-1x1, stride 1, zero padded to preserve spatial size.
Max pooling is 2x2 stride 2. RoI pooling follows the usual quantized-bin max
with gradients routed to the argmax position (first index on ties).
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .geometry import Box

__all__ = [
    "Tensor",
    "conv2d_backward",
    "conv2d_forward",
    "fc_backward",
    "fc_forward",
    "maxpool2_backward",
    "maxpool2_forward",
    "relu_backward",
    "relu_forward",
    "roi_pool_backward",
    "roi_pool_forward",
    "roi_pool_values",
]


class Tensor:
    """A named parameter: dense data with a paired gradient buffer."""

    __slots__ = ("name", "data", "grad")

    def __init__(self, name: str, data: np.ndarray, requires_grad: bool = True):
        self.name = name
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data) if requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor({self.name!r}, shape={self.data.shape})"


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """Uniform fan-in scaled init: U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    limit = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-limit, limit, size=shape)


def conv2d_forward(
    x: np.ndarray, w: np.ndarray, b: np.ndarray
) -> tuple[np.ndarray, tuple]:
    """Stride-1 zero-padded convolution.

    Args:
        x: input map (H, W, Cin)
        w: kernel (kh, kw, Cin, Cout) with odd kh == kw
        b: bias (Cout,)
    Returns:
        output map (H, W, Cout) and the backward cache.
    """
    h, wd, cin = x.shape
    kh, kw, cin_w, cout = w.shape
    if cin_w != cin:
        raise ValueError(f"kernel expects {cin_w} input channels, map has {cin}")
    if kh != kw or kh % 2 != 1:
        raise ValueError(f"kernel must be square with odd size, got {kh}x{kw}")
    pad = kh // 2
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    patches = sliding_window_view(xp, (kh, kw), axis=(0, 1))  # (H, W, Cin, kh, kw)
    cols = patches.transpose(0, 1, 3, 4, 2).reshape(h * wd, kh * kw * cin)
    wmat = w.reshape(kh * kw * cin, cout)
    y = (cols @ wmat + b).reshape(h, wd, cout)
    return y, (xp, w, x.shape)


def conv2d_backward(dy: np.ndarray, cache: tuple) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dx, dw, db) for conv2d_forward."""
    xp, w, xshape = cache
    kh, kw, cin, cout = w.shape
    h, wd, _ = xshape
    pad = kh // 2
    dy2 = dy.reshape(h * wd, cout)

    patches = sliding_window_view(xp, (kh, kw), axis=(0, 1))
    cols = patches.transpose(0, 1, 3, 4, 2).reshape(h * wd, kh * kw * cin)
    dwmat = cols.T @ dy2
    dw = dwmat.reshape(kh, kw, cin, cout)
    db = dy2.sum(axis=0)

    # scatter dy through each kernel tap back onto the padded input
    dxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            dxp[i : i + h, j : j + wd, :] += dy @ w[i, j].T
    dx = dxp[pad : pad + h, pad : pad + wd, :]
    return dx, dw, db


def relu_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mask = x > 0.0
    return np.where(mask, x, 0.0), mask


def relu_backward(dy: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.where(mask, dy, 0.0)


def maxpool2_forward(x: np.ndarray) -> tuple[np.ndarray, tuple]:
    """2x2 stride-2 max pooling; spatial dims must be even."""
    h, w, c = x.shape
    if h % 2 != 0 or w % 2 != 0:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = x.reshape(h2, 2, w2, 2, c).transpose(0, 2, 4, 1, 3).reshape(h2, w2, c, 4)
    idx = windows.argmax(axis=-1)  # first max wins on ties
    y = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return y, (x.shape, idx)


def maxpool2_backward(dy: np.ndarray, cache: tuple) -> np.ndarray:
    (h, w, c), idx = cache
    h2, w2 = h // 2, w // 2
    dwin = np.zeros((h2, w2, c, 4))
    np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
    return dwin.reshape(h2, w2, c, 2, 2).transpose(0, 3, 1, 4, 2).reshape(h, w, c)


def fc_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, tuple]:
    """Affine layer on a (batch, n_in) matrix."""
    return x @ w + b, (x, w)


def fc_backward(dy: np.ndarray, cache: tuple) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, w = cache
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


def _roi_bins(lo: float, hi: float, extent: int, p: int) -> tuple[np.ndarray, np.ndarray]:
    edges = lo + (hi - lo) * np.arange(p + 1) / p
    starts = np.floor(edges[:-1]).astype(np.int64)
    np.maximum(starts, 0, out=starts)
    np.minimum(starts, extent - 1, out=starts)
    ends = np.ceil(edges[1:]).astype(np.int64)
    np.maximum(ends, starts + 1, out=ends)
    np.minimum(ends, extent, out=ends)
    return starts, ends


def roi_pool_forward(
    feature_map: np.ndarray, box: Box, output_size: int
) -> tuple[np.ndarray, tuple]:
    """Max-pool a feature-map region into a fixed output_size x output_size grid.

    The box is given in feature-map coordinates and is clipped to the map
    extent; a zero-area box after clipping is an error. Each output cell takes
    the max over its quantized bin; the backward routes the gradient to the
    argmax position (row-major first index on ties).
    """
    h, w, c = feature_map.shape
    x1 = min(max(box.x1, 0.0), float(w))
    y1 = min(max(box.y1, 0.0), float(h))
    x2 = min(max(box.x2, 0.0), float(w))
    y2 = min(max(box.y2, 0.0), float(h))
    if x2 - x1 <= 0.0 or y2 - y1 <= 0.0:
        raise ValueError(f"zero-area box after clipping to feature map: {box.as_tuple()}")
    p = output_size
    if p < 1:
        raise ValueError(f"output_size must be >= 1, got {p}")

    ys, ye = _roi_bins(y1, y2, h, p)
    xs, xe = _roi_bins(x1, x2, w, p)
    len_y = int((ye - ys).max())
    len_x = int((xe - xs).max())
    # padded gather: every bin expands to a len_y x len_x window with
    # out-of-bin cells masked to -inf; row-major flat order inside each
    # window keeps the first-index tie-break of a direct scan
    row_idx = ys[:, None] + np.arange(len_y)[None, :]          # (p, len_y)
    col_idx = xs[:, None] + np.arange(len_x)[None, :]          # (p, len_x)
    row_ok = row_idx < ye[:, None]
    col_ok = col_idx < xe[:, None]
    gathered = feature_map[
        np.minimum(row_idx, h - 1)[:, None, :, None],
        np.minimum(col_idx, w - 1)[None, :, None, :],
        :,
    ]  # (p, p, len_y, len_x, c)
    mask = row_ok[:, None, :, None] & col_ok[None, :, None, :]
    flat = np.where(mask[..., None], gathered, -np.inf).reshape(p, p, len_y * len_x, c)
    am = flat.argmax(axis=2)
    y = np.take_along_axis(flat, am[:, :, None, :], axis=2)[:, :, 0, :]
    rows = ys[:, None, None] + am // len_x
    cols = xs[None, :, None] + am % len_x
    return y, (feature_map.shape, rows, cols)


def roi_pool_values(feature_map: np.ndarray, box: Box, output_size: int) -> np.ndarray:
    """Forward-only RoI pooling: identical values, no argmax bookkeeping."""
    h, w, c = feature_map.shape
    x1 = min(max(box.x1, 0.0), float(w))
    y1 = min(max(box.y1, 0.0), float(h))
    x2 = min(max(box.x2, 0.0), float(w))
    y2 = min(max(box.y2, 0.0), float(h))
    if x2 - x1 <= 0.0 or y2 - y1 <= 0.0:
        raise ValueError(f"zero-area box after clipping to feature map: {box.as_tuple()}")
    p = output_size
    ys, ye = _roi_bins(y1, y2, h, p)
    xs, xe = _roi_bins(x1, x2, w, p)
    len_y = int((ye - ys).max())
    len_x = int((xe - xs).max())
    row_idx = ys[:, None] + np.arange(len_y)[None, :]
    col_idx = xs[:, None] + np.arange(len_x)[None, :]
    row_ok = row_idx < ye[:, None]
    col_ok = col_idx < xe[:, None]
    gathered = feature_map[
        np.minimum(row_idx, h - 1)[:, None, :, None],
        np.minimum(col_idx, w - 1)[None, :, None, :],
        :,
    ]
    mask = row_ok[:, None, :, None] & col_ok[None, :, None, :]
    return np.where(mask[..., None], gathered, -np.inf).reshape(p, p, len_y * len_x, c).max(axis=2)


def roi_pool_backward(dy: np.ndarray, cache: tuple, out: np.ndarray | None = None) -> np.ndarray:
    shape, rows, cols = cache
    dfm = out if out is not None else np.zeros(shape)
    c = shape[2]
    p = rows.shape[0]
    ch = np.broadcast_to(np.arange(c), (p, p, c))
    # bins can share border rows/cols, so accumulate unbuffered
    np.add.at(dfm, (rows.ravel(), cols.ravel(), ch.ravel()), dy.ravel())
    return dfm
