"""Pure numpy implementations of the hot kernels.

Used when the compiled ``_ckernels`` extension is unavailable (or when
``PMF_PURE_PYTHON=1``). Signatures and results match the Cython versions
exactly; the test suite checks both paths against each other.
"""
import numpy as np


def out_size(n, k, stride, pad, dil):
    return (n + 2 * pad - dil * (k - 1) - 1) // stride + 1


def im2col(x, kh, kw, stride, pad, dil):
    """Unfold ``x[B,C,H,W]`` into rows of receptive fields.

    Returns an array of shape ``[B*Ho*Wo, C*kh*kw]`` whose column order is
    (channel, kernel row, kernel column), matching a weight reshaped to
    ``[Cout, C*kh*kw]``.
    """
    B, C, H, W = x.shape
    Ho = out_size(H, kh, stride, pad, dil)
    Wo = out_size(W, kw, stride, pad, dil)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((B, Ho, Wo, C, kh, kw), dtype=np.float64)
    for i in range(kh):
        r0 = i * dil
        for j in range(kw):
            c0 = j * dil
            patch = xp[:, :, r0:r0 + stride * (Ho - 1) + 1:stride,
                       c0:c0 + stride * (Wo - 1) + 1:stride]
            cols[:, :, :, :, i, j] = patch.transpose(0, 2, 3, 1)
    return cols.reshape(B * Ho * Wo, C * kh * kw)


def col2im(cols, shape, kh, kw, stride, pad, dil):
    """Adjoint of :func:`im2col`: scatter-add rows back into ``shape``."""
    B, C, H, W = shape
    Ho = out_size(H, kh, stride, pad, dil)
    Wo = out_size(W, kw, stride, pad, dil)
    cols = np.ascontiguousarray(cols).reshape(B, Ho, Wo, C, kh, kw)
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=np.float64)
    for i in range(kh):
        r0 = i * dil
        for j in range(kw):
            c0 = j * dil
            xp[:, :, r0:r0 + stride * (Ho - 1) + 1:stride,
               c0:c0 + stride * (Wo - 1) + 1:stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        return np.ascontiguousarray(xp[:, :, pad:pad + H, pad:pad + W])
    return xp


def maxpool2(x):
    """2x2/stride-2 max pool. Returns (output, flat argmax index into x).

    Ties go to the first maximal element in row-major window order.
    """
    B, C, H, W = x.shape
    Ho, Wo = H // 2, W // 2
    win = x.reshape(B, C, Ho, 2, Wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, 4)
    k = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, k[..., None], axis=-1)[..., 0]
    rows = np.arange(Ho)[:, None] * 2 + k // 2
    cols = np.arange(Wo)[None, :] * 2 + k % 2
    plane = (np.arange(B * C).reshape(B, C, 1, 1)) * (H * W)
    idx = plane + rows * W + cols
    return np.ascontiguousarray(out), idx.astype(np.int64)


def zbuffer(pix, depth, H, W):
    """Resolve point-to-pixel collisions, keeping the smallest depth.

    ``pix`` holds flat pixel ids (``-1`` for points out of view). Equal depths
    keep the lower point index. Returns the flat ``H*W`` pixel-to-point map
    with ``-1`` for empty pixels.
    """
    out = np.full(H * W, -1, dtype=np.int64)
    idx = np.flatnonzero(pix >= 0)
    if idx.size == 0:
        return out
    # primary key pixel, then depth, then point index
    order = np.lexsort((idx, depth[idx], pix[idx]))
    sp = pix[idx][order]
    first = np.ones(sp.size, dtype=bool)
    first[1:] = sp[1:] != sp[:-1]
    out[sp[first]] = idx[order][first]
    return out
