"""Pure-numpy compute kernels: im2col convolution and window pooling.

Fallback implementation used when numba is unavailable or when
``PARTSIM_BACKEND=numpy`` is set. Convolutions are "same" shaped
(stride 1, odd kernels, implicit zero padding); pooling is
non-overlapping with the trailing remainder dropped.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(n, cin, h, w) -> (n, h*w, cin*kh*kw) patch matrix with zero padding."""
    n, cin, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (n, cin, h, w, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n, h * w, cin * kh * kw
    )


def conv2d_forward(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    n, cin, h, wd = x.shape
    cout = w.shape[0]
    cols = _im2col(x, w.shape[2], w.shape[3])
    y = cols @ w.reshape(cout, -1).T  # (n, h*w, cout)
    return np.ascontiguousarray(y.transpose(0, 2, 1)).reshape(n, cout, h, wd)


def conv2d_backward(
    x: np.ndarray, w: np.ndarray, dy: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    cols = _im2col(x, kh, kw)  # (n, L, CK)
    dy_r = dy.reshape(n, cout, h * wd)

    dw = np.matmul(dy_r, cols).sum(axis=0).reshape(w.shape)

    dcols = np.matmul(dy_r.transpose(0, 2, 1), w.reshape(cout, -1))  # (n, L, CK)
    dcols = dcols.reshape(n, h, wd, cin, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    dxp = np.zeros((n, cin, h + 2 * ph, wd + 2 * pw), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + h, j : j + wd] += dcols[:, :, i, j]
    return dxp[:, :, ph : ph + h, pw : pw + wd], dw


def maxpool2d_forward(x: np.ndarray, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Returns pooled values and flat (h*w) argmax indices for backward."""
    n, c, h, w = x.shape
    oh, ow = h // size, w // size
    xc = x[:, :, : oh * size, : ow * size]
    xr = np.ascontiguousarray(
        xc.reshape(n, c, oh, size, ow, size).transpose(0, 1, 2, 4, 3, 5)
    ).reshape(n, c, oh, ow, size * size)
    within = xr.argmax(axis=-1)  # first maximum wins
    y = np.take_along_axis(xr, within[..., None], axis=-1)[..., 0]
    gh = np.arange(oh)[:, None] * size + within // size
    gw = np.arange(ow)[None, :] * size + within % size
    idx = (gh * w + gw).astype(np.int64)
    return y, idx


def maxpool2d_backward(
    dy: np.ndarray, idx: np.ndarray, h: int, w: int
) -> np.ndarray:
    n, c, oh, ow = dy.shape
    dx = np.zeros((n, c, h * w), dtype=dy.dtype)
    np.put_along_axis(dx, idx.reshape(n, c, -1), dy.reshape(n, c, -1), axis=2)
    return dx.reshape(n, c, h, w)
