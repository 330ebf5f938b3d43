"""Numba-compiled compute kernels, API-identical to ``_kernels_numpy``.

Each output element is accumulated by a single sequential loop in a fixed
order, so results are bit-reproducible run to run (within this backend).
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _conv2d_fill(x, w, y):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    for ni in range(n):
        for co in range(cout):
            for ci in range(cin):
                for i in range(kh):
                    di = i - ph
                    oh_lo = max(0, -di)
                    oh_hi = min(h, h - di)
                    for j in range(kw):
                        dj = j - pw
                        ow_lo = max(0, -dj)
                        ow_hi = min(wd, wd - dj)
                        wv = w[co, ci, i, j]
                        for oh in range(oh_lo, oh_hi):
                            ih = oh + di
                            for ow in range(ow_lo, ow_hi):
                                y[ni, co, oh, ow] += wv * x[ni, ci, ih, ow + dj]


@njit(cache=True)
def _conv2d_grad_input(w, dy, dx):
    n, cout, h, wd = dy.shape
    _, cin, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    for ni in range(n):
        for ci in range(cin):
            for co in range(cout):
                for i in range(kh):
                    di = i - ph
                    oh_lo = max(0, -di)
                    oh_hi = min(h, h - di)
                    for j in range(kw):
                        dj = j - pw
                        ow_lo = max(0, -dj)
                        ow_hi = min(wd, wd - dj)
                        wv = w[co, ci, i, j]
                        for oh in range(oh_lo, oh_hi):
                            ih = oh + di
                            for ow in range(ow_lo, ow_hi):
                                dx[ni, ci, ih, ow + dj] += wv * dy[ni, co, oh, ow]


@njit(cache=True)
def _conv2d_grad_weight(x, dy, dw):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = dw.shape
    ph, pw = kh // 2, kw // 2
    for ni in range(n):
        for co in range(cout):
            for ci in range(cin):
                for i in range(kh):
                    di = i - ph
                    oh_lo = max(0, -di)
                    oh_hi = min(h, h - di)
                    for j in range(kw):
                        dj = j - pw
                        ow_lo = max(0, -dj)
                        ow_hi = min(wd, wd - dj)
                        s = x[0, 0, 0, 0] * 0.0
                        for oh in range(oh_lo, oh_hi):
                            ih = oh + di
                            for ow in range(ow_lo, ow_hi):
                                s += x[ni, ci, ih, ow + dj] * dy[ni, co, oh, ow]
                        dw[co, ci, i, j] += s


@njit(cache=True)
def _maxpool2d_fill(x, size, y, idx):
    n, c, h, w = x.shape
    oh = h // size
    ow = w // size
    for ni in range(n):
        for ci in range(c):
            for i in range(oh):
                for j in range(ow):
                    bi = i * size
                    bj = j * size
                    best = x[ni, ci, bi, bj]
                    bh = bi
                    bw = bj
                    for a in range(size):
                        for b in range(size):
                            v = x[ni, ci, bi + a, bj + b]
                            if v > best:
                                best = v
                                bh = bi + a
                                bw = bj + b
                    y[ni, ci, i, j] = best
                    idx[ni, ci, i, j] = bh * w + bw


@njit(cache=True)
def _maxpool2d_scatter(dy, idx, dx_flat):
    n, c, oh, ow = dy.shape
    for ni in range(n):
        for ci in range(c):
            for i in range(oh):
                for j in range(ow):
                    dx_flat[ni, ci, idx[ni, ci, i, j]] = dy[ni, ci, i, j]


def conv2d_forward(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    n, _, h, wd = x.shape
    y = np.zeros((n, w.shape[0], h, wd), dtype=x.dtype)
    _conv2d_fill(x, w, y)
    return y


def conv2d_backward(
    x: np.ndarray, w: np.ndarray, dy: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    _conv2d_grad_input(w, dy, dx)
    _conv2d_grad_weight(x, dy, dw)
    return dx, dw


def maxpool2d_forward(x: np.ndarray, size: int) -> tuple[np.ndarray, np.ndarray]:
    n, c, h, w = x.shape
    oh, ow = h // size, w // size
    y = np.empty((n, c, oh, ow), dtype=x.dtype)
    idx = np.empty((n, c, oh, ow), dtype=np.int64)
    _maxpool2d_fill(x, size, y, idx)
    return y, idx


def maxpool2d_backward(
    dy: np.ndarray, idx: np.ndarray, h: int, w: int
) -> np.ndarray:
    n, c = dy.shape[:2]
    dx = np.zeros((n, c, h * w), dtype=dy.dtype)
    _maxpool2d_scatter(dy, idx, dx)
    return dx.reshape(n, c, h, w)
