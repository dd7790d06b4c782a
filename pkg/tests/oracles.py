"""Slow, obviously-correct reference implementations used only by tests."""

import itertools
import math

import mpmath
import numpy as np


def naive_conv(x, w, b, stride, padding):
    """Direct nested-loop cross-correlation for [N,C,*sp] input and [O,C,*k] weight."""
    n, c = x.shape[:2]
    o = w.shape[0]
    k = w.shape[2:]
    nsp = len(k)
    xp = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * nsp)
    out_sp = tuple((s + 2 * padding - kk) // stride + 1 for s, kk in zip(x.shape[2:], k))
    out = np.zeros((n, o) + out_sp)
    for ni in range(n):
        for oi in range(o):
            for pos in itertools.product(*(range(s) for s in out_sp)):
                acc = 0.0 if b is None else b[oi]
                for ci in range(c):
                    for off in itertools.product(*(range(kk) for kk in k)):
                        src = tuple(p * stride + d for p, d in zip(pos, off))
                        acc += xp[(ni, ci) + src] * w[(oi, ci) + off]
                out[(ni, oi) + pos] = acc
    return out


def mp_softmax(row, dps=50):
    with mpmath.workdps(dps):
        e = [mpmath.exp(mpmath.mpf(v)) for v in row]
        s = mpmath.fsum(e)
        return [float(v / s) for v in e]


def mp_log_softmax(row, dps=50):
    with mpmath.workdps(dps):
        vals = [mpmath.mpf(v) for v in row]
        lse = mpmath.log(mpmath.fsum(mpmath.exp(v) for v in vals))
        return [v - lse for v in vals]


def mp_cross_entropy(logits, targets, dps=50):
    with mpmath.workdps(dps):
        total = mpmath.fsum(-mp_log_softmax(row, dps)[t] for row, t in zip(logits, targets))
        return total / len(targets)


def mp_combined_loss(o2d, o3d, targets, lam, dps=50):
    """High-precision CE(o2d) + CE(o3d) + lam * mean((softmax(o2d) - softmax(o3d))^2)."""
    with mpmath.workdps(dps):
        l2 = mp_cross_entropy(o2d, targets, dps)
        l3 = mp_cross_entropy(o3d, targets, dps)
        diffs = []
        for a, b in zip(o2d, o3d):
            ea = [mpmath.exp(mpmath.mpf(v)) for v in a]
            eb = [mpmath.exp(mpmath.mpf(v)) for v in b]
            sa, sb = mpmath.fsum(ea), mpmath.fsum(eb)
            diffs += [(x / sa - y / sb) ** 2 for x, y in zip(ea, eb)]
        return float(l2 + l3 + mpmath.mpf(lam) * mpmath.fsum(diffs) / len(diffs))


def brute_confusion(true, pred, k):
    cm = [[0] * k for _ in range(k)]
    for t, p in zip(true, pred):
        cm[int(t)][int(p)] += 1
    return cm


def brute_metrics(true, pred, k):
    """Per-class one-vs-rest counts recomputed sample by sample."""
    per = []
    for c in range(k):
        tp = sum(1 for t, p in zip(true, pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(true, pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(true, pred) if t == c and p != c)
        tn = sum(1 for t, p in zip(true, pred) if t != c and p != c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        spec = tn / (tn + fp) if tn + fp else 0.0
        per.append((prec, rec, f1, spec))
    acc = sum(1 for t, p in zip(true, pred) if t == p) / len(true)
    return acc, per


def pair_auc(scores, positive):
    """Probability a random positive outscores a random negative, ties counted half."""
    pos = [s for s, y in zip(scores, positive) if y]
    neg = [s for s, y in zip(scores, positive) if not y]
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))


def naive_bilinear_resize(img, out_h, out_w):
    """Half-pixel-centre bilinear resize with edge clamping, one pixel at a time."""
    c, h, w = img.shape
    out = np.zeros((c, out_h, out_w))
    for ch in range(c):
        for i in range(out_h):
            for j in range(out_w):
                y = min(max((i + 0.5) * h / out_h - 0.5, 0.0), h - 1)
                x = min(max((j + 0.5) * w / out_w - 0.5, 0.0), w - 1)
                y0, x0 = int(math.floor(y)), int(math.floor(x))
                y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
                dy, dx = y - y0, x - x0
                out[ch, i, j] = ((1 - dy) * (1 - dx) * img[ch, y0, x0]
                                 + (1 - dy) * dx * img[ch, y0, x1]
                                 + dy * (1 - dx) * img[ch, y1, x0]
                                 + dy * dx * img[ch, y1, x1])
    return out


def naive_gaussian_blur(img, sigma):
    """Non-separable 2D Gaussian with replicated borders."""
    r = int(math.ceil(3 * sigma))
    ax = np.arange(-r, r + 1)
    k1 = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    k2 = np.outer(k1, k1)
    k2 /= k2.sum()
    c, h, w = img.shape
    out = np.zeros_like(img)
    for ch in range(c):
        for i in range(h):
            for j in range(w):
                acc = 0.0
                for di in range(-r, r + 1):
                    for dj in range(-r, r + 1):
                        y = min(max(i + di, 0), h - 1)
                        x = min(max(j + dj, 0), w - 1)
                        acc += k2[di + r, dj + r] * img[ch, y, x]
                out[ch, i, j] = acc
    return out


def naive_bilinear_sample(img, ys, xs):
    """Sample img at float coordinates with border replication."""
    c, h, w = img.shape
    out = np.zeros((c,) + ys.shape)
    for idx in np.ndindex(*ys.shape):
        y = min(max(ys[idx], 0.0), h - 1)
        x = min(max(xs[idx], 0.0), w - 1)
        y0, x0 = int(math.floor(y)), int(math.floor(x))
        y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
        dy, dx = y - y0, x - x0
        for ch in range(c):
            out[(ch,) + idx] = ((1 - dy) * (1 - dx) * img[ch, y0, x0]
                                + (1 - dy) * dx * img[ch, y0, x1]
                                + dy * (1 - dx) * img[ch, y1, x0]
                                + dy * dx * img[ch, y1, x1])
    return out
