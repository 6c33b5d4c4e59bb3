"""Independent brute-force reference implementations used as test oracles.

Everything here is deliberately written as plain loops over definitions,
sharing no code with the package under test.
"""

import math

import numpy as np


def conv2d_loop(x, w, b, stride=1, padding=0):
    """Quadruple-loop cross-correlation."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=x.dtype)
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, ho, wo), dtype=x.dtype)
    for ni in range(n):
        for fi in range(f):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += (xp[ni, ci, oy * stride + ky, ox * stride + kx]
                                        * w[fi, ci, ky, kx])
                    out[ni, fi, oy, ox] = acc + b[fi]
    return out


def maxpool2_loop(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2), dtype=x.dtype)
    for ni in range(n):
        for ci in range(c):
            for oy in range(h // 2):
                for ox in range(w // 2):
                    window = x[ni, ci, 2 * oy:2 * oy + 2, 2 * ox:2 * ox + 2]
                    out[ni, ci, oy, ox] = window.max()
    return out


def upsample2_loop(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, 2 * h, 2 * w), dtype=x.dtype)
    for ni in range(n):
        for ci in range(c):
            for y in range(2 * h):
                for xx in range(2 * w):
                    out[ni, ci, y, xx] = x[ni, ci, y // 2, xx // 2]
    return out


def decode_argmax_loop(grid):
    """Full-grid scan for the first (row-major) maximum."""
    best = -math.inf
    best_yx = (0, 0)
    h, w = grid.shape
    for y in range(h):
        for x in range(w):
            if grid[y, x] > best:
                best = grid[y, x]
                best_yx = (y, x)
    return best_yx, best


def pck_recount(predictions, annotations, subset, thresholds):
    """Per-sample recount of correct keypoints.

    ``thresholds`` is a list of per-sample absolute distance limits. Returns
    (correct, total) dicts keyed by joint.
    """
    correct = {j: 0 for j in subset}
    total = {j: 0 for j in subset}
    for pred, ann, limit in zip(predictions, annotations, thresholds):
        for j in subset:
            if not ann.visible[int(j)]:
                continue
            total[j] += 1
            px, py, _ = pred[j]
            gx, gy = ann.positions[int(j)]
            if math.sqrt((px - gx) ** 2 + (py - gy) ** 2) < limit:
                correct[j] += 1
    return correct, total
