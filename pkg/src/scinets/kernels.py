"""Raw numpy kernels for the convolution family.

Everything here works on plain ``ndarray`` objects; gradient bookkeeping lives
in :mod:`scinets.autodiff`. Convolutions go through an explicit patch gather
(im2col) followed by one large matrix product, so a batch of any size costs a
single GEMM. The ``*_reference`` functions are slow direct loops kept as
independent oracles for the test-suite.
"""

import numpy as np

from .errors import ConfigError, DimensionError


def conv_output_size(size, k, dilation=1, padding=0, stride=1):
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def transpose_output_size(size, k, stride=1, padding=0, output_padding=0, dilation=1):
    return (size - 1) * stride - 2 * padding + dilation * (k - 1) + output_padding + 1


def _check_geometry(dilation, stride, padding):
    if int(dilation) < 1:
        raise ConfigError(f"dilation must be a positive integer, got {dilation}")
    if int(stride) < 1:
        raise ConfigError(f"stride must be a positive integer, got {stride}")
    if int(padding) < 0:
        raise ConfigError(f"padding must be non-negative, got {padding}")


def im2col(xp, k, dilation, stride, ho, wo):
    """Gather k*k shifted views of a padded batch into a column matrix.

    Returns an array of shape ``(c*k*k, n*ho*wo)`` whose rows are ordered
    channel-major, then kernel row, then kernel column.
    """
    n, c = xp.shape[:2]
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, k, k, n, ho, wo), dtype=xp.dtype)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for i in range(k):
        hi = i * dilation
        for j in range(k):
            wj = j * dilation
            cols[:, i, j] = xt[:, :, hi:hi + hspan:stride, wj:wj + wspan:stride]
    return cols.reshape(c * k * k, n * ho * wo)


def col2im(cols, n, c, hp, wp, k, dilation, stride, ho, wo):
    """Scatter-add a column matrix back onto a padded ``(n, c, hp, wp)`` canvas."""
    cols = cols.reshape(c, k, k, n, ho, wo)
    canvas = np.zeros((c, n, hp, wp), dtype=cols.dtype)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for i in range(k):
        hi = i * dilation
        for j in range(k):
            wj = j * dilation
            canvas[:, :, hi:hi + hspan:stride, wj:wj + wspan:stride] += cols[:, i, j]
    return canvas.transpose(1, 0, 2, 3)


def _pad(x, padding):
    if padding == 0:
        return x
    p = padding
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d_forward(x, w, b=None, dilation=1, padding=0, stride=1):
    """Cross-correlation of ``x`` (n, c_in, h, w) with ``w`` (c_out, c_in, k, k).

    Returns ``(out, cols)``; ``cols`` is the gathered patch matrix the backward
    pass reuses.
    """
    _check_geometry(dilation, stride, padding)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects rank-4 input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    co, ci, k, k2 = w.shape
    if k != k2:
        raise DimensionError(f"conv2d kernel must be square, got {k}x{k2}")
    if ci != c:
        raise DimensionError(f"conv2d input has {c} channels but weight expects {ci}")
    ho = conv_output_size(h, k, dilation, padding, stride)
    wo = conv_output_size(wd, k, dilation, padding, stride)
    if ho < 1 or wo < 1:
        raise DimensionError(
            f"conv2d output would be empty: input {h}x{wd}, kernel {k}, dilation {dilation}, "
            f"padding {padding}, stride {stride}"
        )
    cols = im2col(_pad(x, padding), k, dilation, stride, ho, wo)
    out = w.reshape(co, -1) @ cols
    out = out.reshape(co, n, ho, wo).transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.reshape(1, co, 1, 1)
    return np.ascontiguousarray(out), cols


def conv2d_backward(gout, x_shape, w, cols, dilation=1, padding=0, stride=1):
    n, c, h, wd = x_shape
    co, _, k, _ = w.shape
    ho, wo = gout.shape[2:]
    g2 = gout.transpose(1, 0, 2, 3).reshape(co, -1)
    gw = (g2 @ cols.T).reshape(w.shape)
    gb = g2.sum(axis=1)
    gcols = w.reshape(co, -1).T @ g2
    gxp = col2im(gcols, n, c, h + 2 * padding, wd + 2 * padding, k, dilation, stride, ho, wo)
    if padding:
        gxp = gxp[:, :, padding:padding + h, padding:padding + wd]
    return np.ascontiguousarray(gxp), gw, gb


def conv_transpose2d_forward(x, w, b=None, stride=1, padding=0, output_padding=0, dilation=1):
    """Transposed convolution; ``w`` has shape (c_in, c_out, k, k).

    This is exactly the adjoint of :func:`conv2d_forward` with the same
    stride/padding/dilation, plus ``output_padding`` extra rows and columns at
    the bottom/right edge.
    """
    _check_geometry(dilation, stride, padding)
    if output_padding < 0 or output_padding >= max(stride, dilation):
        raise ConfigError(
            f"output_padding must lie in [0, max(stride, dilation)), got {output_padding}"
        )
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(
            f"conv_transpose2d expects rank-4 input and weight, got {x.shape} and {w.shape}"
        )
    n, c, h, wd = x.shape
    ci, co, k, _ = w.shape
    if ci != c:
        raise DimensionError(f"conv_transpose2d input has {c} channels but weight expects {ci}")
    oh = transpose_output_size(h, k, stride, padding, output_padding, dilation)
    ow = transpose_output_size(wd, k, stride, padding, output_padding, dilation)
    if oh < 1 or ow < 1:
        raise DimensionError(f"conv_transpose2d output would be empty for input {h}x{wd}")
    x2 = x.transpose(1, 0, 2, 3).reshape(c, -1)
    cols = w.reshape(ci, -1).T @ x2
    full_h = (h - 1) * stride + dilation * (k - 1) + 1 + output_padding
    full_w = (wd - 1) * stride + dilation * (k - 1) + 1 + output_padding
    canvas = col2im(cols, n, co, full_h, full_w, k, dilation, stride, h, wd)
    out = canvas[:, :, padding:padding + oh, padding:padding + ow]
    if b is not None:
        out = out + b.reshape(1, co, 1, 1)
    return np.ascontiguousarray(out)


def conv_transpose2d_backward(gout, x, w, stride=1, padding=0, output_padding=0, dilation=1):
    n, c, h, wd = x.shape
    ci, co, k, _ = w.shape
    oh, ow = gout.shape[2:]
    full_h = (h - 1) * stride + dilation * (k - 1) + 1 + output_padding
    full_w = (wd - 1) * stride + dilation * (k - 1) + 1 + output_padding
    canvas = np.zeros((n, co, full_h, full_w), dtype=gout.dtype)
    canvas[:, :, padding:padding + oh, padding:padding + ow] = gout
    gcols = im2col(canvas, k, dilation, stride, h, wd)
    x2 = x.transpose(1, 0, 2, 3).reshape(c, -1)
    gx = (w.reshape(ci, -1) @ gcols).reshape(c, n, h, wd).transpose(1, 0, 2, 3)
    gw = (x2 @ gcols.T).reshape(w.shape)
    gb = gout.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(gx), gw, gb


def maxpool2d_forward(x, k=2):
    """Non-overlapping ``k``x``k`` max pooling.

    Returns ``(out, argmax)`` where ``argmax`` holds the row-major position of
    the first maximum inside each window.
    """
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ConfigError(f"maxpool window {k} does not divide spatial dims {h}x{w}")
    win = x.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // k, w // k, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool2d_backward(gout, arg, k=2):
    n, c, ho, wo = gout.shape
    hot = (np.arange(k * k) == arg[..., None]) * gout[..., None]
    hot = hot.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(hot.reshape(n, c, ho * k, wo * k).astype(gout.dtype, copy=False))


# -- direct-loop oracles ---------------------------------------------------

def conv2d_reference(x, w, b=None, dilation=1, padding=0, stride=1):
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    ho = conv_output_size(h, k, dilation, padding, stride)
    wo = conv_output_size(wd, k, dilation, padding, stride)
    xp = _pad(x, padding)
    out = np.zeros((n, co, ho, wo), dtype=np.float64)
    for bi in range(n):
        for o in range(co):
            for y in range(ho):
                for z in range(wo):
                    acc = 0.0 if b is None else float(b[o])
                    for ch in range(c):
                        for i in range(k):
                            for j in range(k):
                                acc += w[o, ch, i, j] * xp[bi, ch, y * stride + i * dilation,
                                                         z * stride + j * dilation]
                    out[bi, o, y, z] = acc
    return out


def conv_transpose2d_reference(x, w, b=None, stride=1, padding=0, output_padding=0, dilation=1):
    """Scatter each input pixel through the kernel onto the output grid."""
    n, c, h, wd = x.shape
    _, co, k, _ = w.shape
    oh = transpose_output_size(h, k, stride, padding, output_padding, dilation)
    ow = transpose_output_size(wd, k, stride, padding, output_padding, dilation)
    out = np.zeros((n, co, oh, ow), dtype=np.float64)
    for bi in range(n):
        for ch in range(c):
            for y in range(h):
                for z in range(wd):
                    for o in range(co):
                        for i in range(k):
                            for j in range(k):
                                oy = y * stride + i * dilation - padding
                                oz = z * stride + j * dilation - padding
                                if 0 <= oy < oh and 0 <= oz < ow:
                                    out[bi, o, oy, oz] += x[bi, ch, y, z] * w[ch, o, i, j]
    if b is not None:
        out += np.asarray(b).reshape(1, co, 1, 1)
    return out


def maxpool2d_reference(x, k=2):
    n, c, h, w = x.shape
    out = np.empty((n, c, h // k, w // k), dtype=x.dtype)
    for bi in range(n):
        for ch in range(c):
            for y in range(h // k):
                for z in range(w // k):
                    out[bi, ch, y, z] = max(
                        x[bi, ch, y * k + i, z * k + j] for i in range(k) for j in range(k)
                    )
    return out
