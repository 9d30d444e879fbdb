"""Hot inner loops, each with a numba kernel and a vectorised numpy twin.

The public names (``im2col``, ``col2im``, ``label8``, ``patch_build``,
``patch_fold``) resolve to one of the two at import time according to
:data:`lrrnet._jit.USE_NUMBA`. Both variants stay importable so tests and
``benchmarks/bench_kernels.py`` can compare them directly.
"""
import numpy as np
from scipy import ndimage

from ._jit import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# im2col / col2im for square kernels on an already padded NCHW input
# ---------------------------------------------------------------------------


def im2col_numpy(xp, k, stride, ho, wo):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * k * k, ho * wo)


def col2im_numpy(cols, hp, wp, k, stride, ho, wo):
    n = cols.shape[0]
    c = cols.shape[1] // (k * k)
    cols = cols.reshape(n, c, k, k, ho, wo)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    return out


@njit
def _im2col_loops(xp, k, stride, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((n, c * k * k, ho * wo), dtype=xp.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(k):
                for j in range(k):
                    row = (ch * k + i) * k + j
                    for y in range(ho):
                        yy = y * stride + i
                        base = y * wo
                        for x in range(wo):
                            cols[b, row, base + x] = xp[b, ch, yy, x * stride + j]
    return cols


@njit
def _col2im_loops(cols, hp, wp, k, stride, ho, wo):
    n = cols.shape[0]
    c = cols.shape[1] // (k * k)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(k):
                for j in range(k):
                    row = (ch * k + i) * k + j
                    for y in range(ho):
                        yy = y * stride + i
                        base = y * wo
                        for x in range(wo):
                            out[b, ch, yy, x * stride + j] += cols[b, row, base + x]
    return out


def im2col_numba(xp, k, stride, ho, wo):
    return _im2col_loops(np.ascontiguousarray(xp), k, stride, ho, wo)


def col2im_numba(cols, hp, wp, k, stride, ho, wo):
    return _col2im_loops(np.ascontiguousarray(cols), hp, wp, k, stride, ho, wo)


# ---------------------------------------------------------------------------
# 8-connected component labelling; labels numbered by first pixel in raster order
# ---------------------------------------------------------------------------

_EIGHT = np.ones((3, 3), dtype=bool)


def label8_numpy(mask):
    labels, count = ndimage.label(mask, structure=_EIGHT)
    if count == 0:
        return labels.astype(np.int32), 0
    # renumber by first raster occurrence so both backends agree exactly
    flat = labels.ravel()
    ids, first = np.unique(flat, return_index=True)
    keep = ids > 0
    order = np.argsort(first[keep], kind="stable")
    remap = np.zeros(count + 1, dtype=np.int32)
    remap[ids[keep][order]] = np.arange(1, count + 1, dtype=np.int32)
    return remap[labels], int(count)


@njit
def _find(parent, a):
    root = a
    while parent[root] != root:
        root = parent[root]
    while parent[a] != root:
        nxt = parent[a]
        parent[a] = root
        a = nxt
    return root


@njit
def _union(parent, a, b):
    ra = _find(parent, a)
    rb = _find(parent, b)
    if ra < rb:
        parent[rb] = ra
    elif rb < ra:
        parent[ra] = rb


@njit
def _label8_loops(mask):
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    parent = np.zeros(h * w // 2 + 2, dtype=np.int32)
    nxt = 1
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            cur = 0
            # already visited neighbours: W, NW, N, NE
            for dy, dx in ((0, -1), (-1, -1), (-1, 0), (-1, 1)):
                yy = y + dy
                xx = x + dx
                if yy < 0 or xx < 0 or xx >= w:
                    continue
                lab = labels[yy, xx]
                if lab == 0:
                    continue
                if cur == 0:
                    cur = lab
                else:
                    _union(parent, cur, lab)
            if cur == 0:
                if nxt >= parent.shape[0]:
                    grown = np.zeros(parent.shape[0] * 2, dtype=np.int32)
                    grown[: parent.shape[0]] = parent
                    parent = grown
                parent[nxt] = nxt
                cur = nxt
                nxt += 1
            labels[y, x] = cur
    compact = np.zeros(nxt, dtype=np.int32)
    count = 0
    for y in range(h):
        for x in range(w):
            lab = labels[y, x]
            if lab == 0:
                continue
            root = _find(parent, lab)
            if compact[root] == 0:
                count += 1
                compact[root] = count
            labels[y, x] = compact[root]
    return labels, count


def label8_numba(mask):
    labels, count = _label8_loops(np.ascontiguousarray(mask, dtype=np.bool_))
    return labels, int(count)


# ---------------------------------------------------------------------------
# patch-image construction and coverage-averaged fold-back
# ---------------------------------------------------------------------------


def patch_build_numpy(img, p, s):
    win = np.lib.stride_tricks.sliding_window_view(img, (p, p))[::s, ::s]
    ni, nj = win.shape[:2]
    return np.ascontiguousarray(win.reshape(ni * nj, p * p).T)


def patch_fold_numpy(m, h, w, p, s):
    ni = (h - p) // s + 1
    nj = (w - p) // s + 1
    acc = np.zeros((h, w), dtype=np.float64)
    cnt = np.zeros((h, w), dtype=np.int64)
    col = 0
    for i in range(ni):
        for j in range(nj):
            acc[i * s : i * s + p, j * s : j * s + p] += m[:, col].reshape(p, p)
            cnt[i * s : i * s + p, j * s : j * s + p] += 1
            col += 1
    return acc, cnt


@njit
def _patch_build_loops(img, p, s):
    h, w = img.shape
    ni = (h - p) // s + 1
    nj = (w - p) // s + 1
    out = np.empty((p * p, ni * nj), dtype=np.float64)
    col = 0
    for i in range(ni):
        for j in range(nj):
            r = 0
            for y in range(p):
                for x in range(p):
                    out[r, col] = img[i * s + y, j * s + x]
                    r += 1
            col += 1
    return out


@njit
def _patch_fold_loops(m, h, w, p, s):
    ni = (h - p) // s + 1
    nj = (w - p) // s + 1
    acc = np.zeros((h, w), dtype=np.float64)
    cnt = np.zeros((h, w), dtype=np.int64)
    col = 0
    for i in range(ni):
        for j in range(nj):
            r = 0
            for y in range(p):
                for x in range(p):
                    acc[i * s + y, j * s + x] += m[r, col]
                    cnt[i * s + y, j * s + x] += 1
                    r += 1
            col += 1
    return acc, cnt


def patch_build_numba(img, p, s):
    return _patch_build_loops(np.ascontiguousarray(img, dtype=np.float64), p, s)


def patch_fold_numba(m, h, w, p, s):
    return _patch_fold_loops(np.ascontiguousarray(m, dtype=np.float64), h, w, p, s)


if USE_NUMBA:
    im2col, col2im = im2col_numba, col2im_numba
    label8 = label8_numba
    patch_build, patch_fold = patch_build_numba, patch_fold_numba
else:
    im2col, col2im = im2col_numpy, col2im_numpy
    label8 = label8_numpy
    patch_build, patch_fold = patch_build_numpy, patch_fold_numpy
