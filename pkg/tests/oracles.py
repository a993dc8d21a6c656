"""Slow, loop-based reference implementations used as test oracles."""
import math

import numpy as np


def seqasr_ref(conf, iou, tau=0.3, tau_iou=0.1):
    fails = 0
    for c, o in zip(conf, iou):
        if c < tau or o < tau_iou:
            fails += 1
    return 100.0 * fails / len(conf)


def cvar_ref(conf, iou, tau_iou=0.1, alpha=0.1):
    gated = []
    for c, o in zip(conf, iou):
        gated.append(c if o >= tau_iou else 0.0)
    m = 1
    while m < alpha * len(gated) - 1e-12:
        m += 1
    # repeated selection of the current maximum
    pool = list(gated)
    total = 0.0
    for _ in range(m):
        j = max(range(len(pool)), key=lambda i: pool[i])
        total += pool.pop(j)
    return 100.0 * total / m


def ndr_flag_ref(conf, iou, tau=0.3, tau_iou=0.1, mode="max-threshold"):
    if mode == "max-threshold":
        return max(conf) < tau and max(iou) < tau_iou
    return all(c < tau or o < tau_iou for c, o in zip(conf, iou))


def box_iou_ref(a, b, n=400):
    """IoU by counting grid cells of an ``n x n`` raster; only for integer boxes in [0, n]."""
    inter = union = 0
    for y in range(n):
        for x in range(n):
            ia = a[0] <= x < a[2] and a[1] <= y < a[3]
            ib = b[0] <= x < b[2] and b[1] <= y < b[3]
            inter += ia and ib
            union += ia or ib
    return inter / union if union else 0.0


def ctrl_ref(points, sigma):
    n = len(points)
    s = 0.0
    for i in range(n):
        for j in range(n):
            d2 = (points[i][0] - points[j][0]) ** 2 + (points[i][1] - points[j][1]) ** 2
            s += math.exp(-d2 / sigma ** 2)
    return s / n ** 2 - 1.0 / n


def rel_err(analytic, numeric):
    """Largest absolute deviation relative to the largest finite-difference component."""
    a = np.asarray(analytic, dtype=np.float64)
    f = np.asarray(numeric, dtype=np.float64)
    return float(np.abs(a - f).max() / max(np.abs(f).max(), 1e-12))


def central_diff(fn, x, h):
    """Central differences of scalar ``fn`` at every entry of array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = fn(x)
        x[idx] = old - h
        fm = fn(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g
