"""Bilinear sampling kernels for deformable convolution.

Three hot loops live here: gathering bilinearly sampled columns
(``deform_im2col``), scattering column gradients back onto the input map
(``deform_col2im``) and reducing column gradients into offset gradients
(``deform_offset_grad``). Each has a numba version and a pure-numpy
version with identical semantics. The numba path is used when numba imports
and ``STSN_DISABLE_NUMBA`` is unset or ``0``.

Sampling geometry, shared by every kernel: for output cell ``(i, j)`` and
grid point ``n`` the sample sits at::

    y = i - pad + grid_y[n] + offsets[2n, i, j]
    x = j - pad + grid_x[n] + offsets[2n + 1, i, j]

where ``grid_y``/``grid_x`` are tap positions measured from the top-left of
the (unpadded) window. Neighbours outside the map read as zero. Derivatives with respect to the
position come from the cell ``[floor(y), floor(y) + 1] x [floor(x), floor(x) + 1]``,
so an exactly integer coordinate takes the cell toward higher indices.
"""

import os

import numpy as np

__all__ = [
    "BACKEND",
    "deform_im2col",
    "deform_col2im",
    "deform_offset_grad",
    "numpy_kernels",
    "numba_kernels",
]


def _env_disabled():
    return os.environ.get("STSN_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")


# --------------------------------------------------------------------------
# numpy path
# --------------------------------------------------------------------------


def _corners(offsets, grid_y, grid_x, pad, H, W):
    """Sample corners and bilinear weights, each shaped [N, L]."""
    n_pts = grid_y.shape[0]
    ho, wo = offsets.shape[1], offsets.shape[2]
    off = offsets.reshape(n_pts, 2, ho * wo)
    ii = np.repeat(np.arange(ho, dtype=offsets.dtype), wo)
    jj = np.tile(np.arange(wo, dtype=offsets.dtype), ho)
    py = (ii[None, :] - pad + grid_y[:, None]) + off[:, 0, :]
    px = (jj[None, :] - pad + grid_x[:, None]) + off[:, 1, :]
    fy = np.floor(py)
    fx = np.floor(px)
    ly = py - fy
    lx = px - fx
    y0 = fy.astype(np.int64)
    x0 = fx.astype(np.int64)
    y1 = y0 + 1
    x1 = x0 + 1
    vy0 = (y0 >= 0) & (y0 < H)
    vy1 = (y1 >= 0) & (y1 < H)
    vx0 = (x0 >= 0) & (x0 < W)
    vx1 = (x1 >= 0) & (x1 < W)
    return y0, x0, y1, x1, ly, lx, (vy0 & vx0, vy0 & vx1, vy1 & vx0, vy1 & vx1)


def _read(x, ys, xs, valid):
    # x: [C, H, W]; returns [C, N, L] with zeros where invalid
    H, W = x.shape[1], x.shape[2]
    flat = np.clip(ys, 0, H - 1) * W + np.clip(xs, 0, W - 1)
    vals = x.reshape(x.shape[0], H * W)[:, flat]
    return np.where(valid[None], vals, 0.0).astype(x.dtype, copy=False)


def _np_im2col(x, offsets, grid_y, grid_x, pad):
    C, H, W = x.shape
    y0, x0, y1, x1, ly, lx, valid = _corners(offsets, grid_y, grid_x, pad, H, W)
    hy = 1.0 - ly
    hx = 1.0 - lx
    v00 = _read(x, y0, x0, valid[0])
    v01 = _read(x, y0, x1, valid[1])
    v10 = _read(x, y1, x0, valid[2])
    v11 = _read(x, y1, x1, valid[3])
    cols = (hy * hx) * v00 + (hy * lx) * v01 + (ly * hx) * v10 + (ly * lx) * v11
    return np.ascontiguousarray(cols.reshape(C * grid_y.shape[0], -1))


def _np_col2im(gcols, offsets, grid_y, grid_x, pad, H, W):
    n_pts = grid_y.shape[0]
    C = gcols.shape[0] // n_pts
    g = gcols.reshape(C, n_pts, -1)
    y0, x0, y1, x1, ly, lx, valid = _corners(offsets, grid_y, grid_x, pad, H, W)
    hy = 1.0 - ly
    hx = 1.0 - lx
    out = np.zeros(C * H * W, dtype=gcols.dtype)
    base = (np.arange(C) * (H * W))[:, None, None]
    for ys, xs, wgt, ok in (
        (y0, x0, hy * hx, valid[0]),
        (y0, x1, hy * lx, valid[1]),
        (y1, x0, ly * hx, valid[2]),
        (y1, x1, ly * lx, valid[3]),
    ):
        idx = base + (ys * W + xs)[None]
        contrib = g * wgt[None]
        out += np.bincount(idx[:, ok].ravel(), weights=contrib[:, ok].ravel(), minlength=C * H * W)
    return out.reshape(C, H, W)


def _np_offset_grad(gcols, x, offsets, grid_y, grid_x, pad):
    C, H, W = x.shape
    n_pts = grid_y.shape[0]
    g = gcols.reshape(C, n_pts, -1)
    y0, x0, y1, x1, ly, lx, valid = _corners(offsets, grid_y, grid_x, pad, H, W)
    v00 = _read(x, y0, x0, valid[0])
    v01 = _read(x, y0, x1, valid[1])
    v10 = _read(x, y1, x0, valid[2])
    v11 = _read(x, y1, x1, valid[3])
    dy = (1.0 - lx) * (v10 - v00) + lx * (v11 - v01)
    dx = (1.0 - ly) * (v01 - v00) + ly * (v11 - v10)
    out = np.empty((n_pts, 2, g.shape[2]), dtype=gcols.dtype)
    out[:, 0] = (g * dy).sum(axis=0)
    out[:, 1] = (g * dx).sum(axis=0)
    return out.reshape(offsets.shape)


numpy_kernels = (_np_im2col, _np_col2im, _np_offset_grad)


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------


def _build_numba():
    from numba import njit

    @njit(cache=True, nogil=True)
    def im2col(x, offsets, grid_y, grid_x, pad):
        C, H, W = x.shape
        n_pts = grid_y.shape[0]
        ho, wo = offsets.shape[1], offsets.shape[2]
        cols = np.zeros((C * n_pts, ho * wo), dtype=x.dtype)
        for n in range(n_pts):
            for i in range(ho):
                for j in range(wo):
                    py = (i - pad + grid_y[n]) + offsets[2 * n, i, j]
                    px = (j - pad + grid_x[n]) + offsets[2 * n + 1, i, j]
                    fy = np.floor(py)
                    fx = np.floor(px)
                    ly = py - fy
                    lx = px - fx
                    hy = 1.0 - ly
                    hx = 1.0 - lx
                    y0 = int(fy)
                    x0 = int(fx)
                    y1 = y0 + 1
                    x1 = x0 + 1
                    ok00 = y0 >= 0 and y0 < H and x0 >= 0 and x0 < W
                    ok01 = y0 >= 0 and y0 < H and x1 >= 0 and x1 < W
                    ok10 = y1 >= 0 and y1 < H and x0 >= 0 and x0 < W
                    ok11 = y1 >= 0 and y1 < H and x1 >= 0 and x1 < W
                    w00 = hy * hx
                    w01 = hy * lx
                    w10 = ly * hx
                    w11 = ly * lx
                    col = i * wo + j
                    for c in range(C):
                        v00 = x[c, y0, x0] if ok00 else 0.0
                        v01 = x[c, y0, x1] if ok01 else 0.0
                        v10 = x[c, y1, x0] if ok10 else 0.0
                        v11 = x[c, y1, x1] if ok11 else 0.0
                        cols[c * n_pts + n, col] = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11
        return cols

    @njit(cache=True, nogil=True)
    def col2im(gcols, offsets, grid_y, grid_x, pad, H, W):
        n_pts = grid_y.shape[0]
        C = gcols.shape[0] // n_pts
        ho, wo = offsets.shape[1], offsets.shape[2]
        out = np.zeros((C, H, W), dtype=gcols.dtype)
        for n in range(n_pts):
            for i in range(ho):
                for j in range(wo):
                    py = (i - pad + grid_y[n]) + offsets[2 * n, i, j]
                    px = (j - pad + grid_x[n]) + offsets[2 * n + 1, i, j]
                    fy = np.floor(py)
                    fx = np.floor(px)
                    ly = py - fy
                    lx = px - fx
                    hy = 1.0 - ly
                    hx = 1.0 - lx
                    y0 = int(fy)
                    x0 = int(fx)
                    y1 = y0 + 1
                    x1 = x0 + 1
                    col = i * wo + j
                    in_y0 = y0 >= 0 and y0 < H
                    in_y1 = y1 >= 0 and y1 < H
                    in_x0 = x0 >= 0 and x0 < W
                    in_x1 = x1 >= 0 and x1 < W
                    for c in range(C):
                        g = gcols[c * n_pts + n, col]
                        if in_y0 and in_x0:
                            out[c, y0, x0] += g * (hy * hx)
                        if in_y0 and in_x1:
                            out[c, y0, x1] += g * (hy * lx)
                        if in_y1 and in_x0:
                            out[c, y1, x0] += g * (ly * hx)
                        if in_y1 and in_x1:
                            out[c, y1, x1] += g * (ly * lx)
        return out

    @njit(cache=True, nogil=True)
    def offset_grad(gcols, x, offsets, grid_y, grid_x, pad):
        C, H, W = x.shape
        n_pts = grid_y.shape[0]
        ho, wo = offsets.shape[1], offsets.shape[2]
        out = np.zeros(offsets.shape, dtype=gcols.dtype)
        for n in range(n_pts):
            for i in range(ho):
                for j in range(wo):
                    py = (i - pad + grid_y[n]) + offsets[2 * n, i, j]
                    px = (j - pad + grid_x[n]) + offsets[2 * n + 1, i, j]
                    fy = np.floor(py)
                    fx = np.floor(px)
                    ly = py - fy
                    lx = px - fx
                    y0 = int(fy)
                    x0 = int(fx)
                    y1 = y0 + 1
                    x1 = x0 + 1
                    ok00 = y0 >= 0 and y0 < H and x0 >= 0 and x0 < W
                    ok01 = y0 >= 0 and y0 < H and x1 >= 0 and x1 < W
                    ok10 = y1 >= 0 and y1 < H and x0 >= 0 and x0 < W
                    ok11 = y1 >= 0 and y1 < H and x1 >= 0 and x1 < W
                    col = i * wo + j
                    acc_y = 0.0
                    acc_x = 0.0
                    for c in range(C):
                        v00 = x[c, y0, x0] if ok00 else 0.0
                        v01 = x[c, y0, x1] if ok01 else 0.0
                        v10 = x[c, y1, x0] if ok10 else 0.0
                        v11 = x[c, y1, x1] if ok11 else 0.0
                        g = gcols[c * n_pts + n, col]
                        acc_y += g * ((1.0 - lx) * (v10 - v00) + lx * (v11 - v01))
                        acc_x += g * ((1.0 - ly) * (v01 - v00) + ly * (v11 - v10))
                    out[2 * n, i, j] = acc_y
                    out[2 * n + 1, i, j] = acc_x
        return out

    return im2col, col2im, offset_grad


numba_kernels = None
if not _env_disabled():
    try:
        numba_kernels = _build_numba()
    except ImportError:  # pragma: no cover - numba is optional
        numba_kernels = None

BACKEND = "numba" if numba_kernels is not None else "numpy"
_im2col, _col2im, _offset_grad = numba_kernels or numpy_kernels


def deform_im2col(x, offsets, grid_y, grid_x, pad):
    """Bilinearly sampled columns ``[C * N, Ho * Wo]`` (channel-major rows)."""
    return _im2col(x, offsets, grid_y, grid_x, pad)


def deform_col2im(gcols, offsets, grid_y, grid_x, pad, H, W):
    """Adjoint of :func:`deform_im2col` with respect to the input map."""
    return _col2im(gcols, offsets, grid_y, grid_x, pad, H, W)


def deform_offset_grad(gcols, x, offsets, grid_y, grid_x, pad):
    """Gradient of ``sum(gcols * deform_im2col(x, offsets))`` w.r.t. the offsets."""
    return _offset_grad(gcols, x, offsets, grid_y, grid_x, pad)
