"""Independent scalar reference implementations used as test oracles.

Everything here is written with plain Python loops and the textbook formulas,
deliberately sharing no code with the production package. Slow is fine; these
only run on tiny inputs.
"""

import math

import numpy as np


def source_coord(i_out, n_in, n_out):
    # half-pixel-center mapping
    return (i_out + 0.5) * (n_in / n_out) - 0.5


def clamp(i, lo, hi):
    return max(lo, min(hi, i))


def bilinear_scalar(src, out_h, out_w):
    """Separable bilinear resample with edge clamping, one pixel at a time."""
    src = np.asarray(src, dtype=float)
    in_h, in_w = src.shape
    out = np.zeros((out_h, out_w))
    for oy in range(out_h):
        y = source_coord(oy, in_h, out_h)
        y0 = math.floor(y)
        fy = y - y0
        for ox in range(out_w):
            x = source_coord(ox, in_w, out_w)
            x0 = math.floor(x)
            fx = x - x0
            acc = 0.0
            for dy, wy in ((0, 1.0 - fy), (1, fy)):
                for dx, wx in ((0, 1.0 - fx), (1, fx)):
                    yy = clamp(y0 + dy, 0, in_h - 1)
                    xx = clamp(x0 + dx, 0, in_w - 1)
                    acc += wy * wx * src[yy, xx]
            out[oy, ox] = acc
    return out


def keys_weight(x, a=-0.5):
    """Cubic convolution kernel (Keys), support [-2, 2]."""
    x = abs(x)
    if x <= 1.0:
        return (a + 2.0) * x**3 - (a + 3.0) * x**2 + 1.0
    if x < 2.0:
        return a * x**3 - 5.0 * a * x**2 + 8.0 * a * x - 4.0 * a
    return 0.0


def bicubic_scalar(src, out_h, out_w, a=-0.5):
    """Separable cubic convolution with edge clamping, one pixel at a time."""
    src = np.asarray(src, dtype=float)
    in_h, in_w = src.shape
    out = np.zeros((out_h, out_w))
    for oy in range(out_h):
        y = source_coord(oy, in_h, out_h)
        y0 = math.floor(y)
        fy = y - y0
        for ox in range(out_w):
            x = source_coord(ox, in_w, out_w)
            x0 = math.floor(x)
            fx = x - x0
            acc = 0.0
            for dy in range(-1, 3):
                wy = keys_weight(dy - fy, a)
                yy = clamp(y0 + dy, 0, in_h - 1)
                for dx in range(-1, 3):
                    wx = keys_weight(dx - fx, a)
                    xx = clamp(x0 + dx, 0, in_w - 1)
                    acc += wy * wx * src[yy, xx]
            out[oy, ox] = acc
    return out


def block_average_scalar(src, factor):
    src = np.asarray(src, dtype=float)
    in_h, in_w = src.shape
    out = np.zeros((in_h // factor, in_w // factor))
    for oy in range(out.shape[0]):
        for ox in range(out.shape[1]):
            s = 0.0
            for dy in range(factor):
                for dx in range(factor):
                    s += src[oy * factor + dy, ox * factor + dx]
            out[oy, ox] = s / (factor * factor)
    return out


def conv2d_scalar(x, kernels, biases):
    """Direct quadruple-loop 2D convolution, zero-padded 'same', stride 1.

    x: (cin, h, w), kernels: (cout, cin, k, k), biases: (cout,).
    """
    x = np.asarray(x, dtype=float)
    kernels = np.asarray(kernels, dtype=float)
    cin, h, w = x.shape
    cout, cin2, k, _ = kernels.shape
    assert cin == cin2
    p = k // 2
    out = np.zeros((cout, h, w))
    for o in range(cout):
        for oy in range(h):
            for ox in range(w):
                acc = biases[o]
                for c in range(cin):
                    for ky in range(k):
                        for kx in range(k):
                            iy = oy + ky - p
                            ix = ox + kx - p
                            if 0 <= iy < h and 0 <= ix < w:
                                acc += kernels[o, c, ky, kx] * x[c, iy, ix]
                out[o, oy, ox] = acc
    return out


def relu_scalar(x):
    return np.maximum(np.asarray(x, dtype=float), 0.0)


def confusion_scalar(pred_bits, target_bits):
    """Count TP/FP/FN/TN by explicit enumeration."""
    tp = fp = fn = tn = 0
    for p, t in zip(np.asarray(pred_bits).ravel(), np.asarray(target_bits).ravel()):
        if p and t:
            tp += 1
        elif p and not t:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def metrics_from_confusion(tp, fp, fn):
    """Precision / F1 / threat score with the empty-positive conventions:
    a zero denominator yields 1 when there are also no misses, else 0."""
    empty_default = 1.0 if fn == 0 else 0.0
    precision = tp / (tp + fp) if (tp + fp) > 0 else empty_default
    f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) > 0 else empty_default
    threat = tp / (tp + fp + fn) if (tp + fp + fn) > 0 else empty_default
    return precision, f1, threat
