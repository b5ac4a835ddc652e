"""Independent scalar-loop references used by unit and acceptance tests.

Nothing here imports the package's numerical kernels; inputs and outputs are
plain numpy arrays or Python floats.
"""
import math

import numpy as np


def bilinear_sample(img, oh, ow):
    """Corner-aligned bilinear resize of a 2-D array, one output cell at a time."""
    h, w = img.shape
    out = np.zeros((oh, ow))
    for i in range(oh):
        y = 0.0 if oh == 1 else i * (h - 1) / (oh - 1)
        y0 = min(int(math.floor(y)), h - 1)
        y1 = min(y0 + 1, h - 1)
        fy = y - y0
        for j in range(ow):
            x = 0.0 if ow == 1 else j * (w - 1) / (ow - 1)
            x0 = min(int(math.floor(x)), w - 1)
            x1 = min(x0 + 1, w - 1)
            fx = x - x0
            out[i, j] = ((1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x1]
                         + fy * (1 - fx) * img[y1, x0] + fy * fx * img[y1, x1])
    return out


def deconv_scatter(f, w, stride, pad):
    """Transposed convolution of one C×h×w map by scattering each input cell."""
    c_in, h, wd = f.shape
    _, c_out, kh, kw = w.shape
    sh, sw = stride
    ph, pw = pad
    full_h, full_w = (h - 1) * sh + kh, (wd - 1) * sw + kw
    full = np.zeros((c_out, full_h, full_w))
    for ci in range(c_in):
        for i in range(h):
            for j in range(wd):
                for co in range(c_out):
                    for a in range(kh):
                        for b in range(kw):
                            full[co, i * sh + a, j * sw + b] += f[ci, i, j] * w[ci, co, a, b]
    return full[:, ph:full_h - ph, pw:full_w - pw]


def mix(weight, x):
    """1×1 channel mixing ``out[o] = sum_c weight[o, c] x[c]``."""
    out = np.zeros((weight.shape[0],) + x.shape[1:])
    for o in range(weight.shape[0]):
        for c in range(weight.shape[1]):
            out[o] += weight[o, c] * x[c]
    return out


def dbblock_flat(features, scales, target):
    """Sum over scales of ``Wd · up_d(f) + Wb · up_b(f)`` for one image.

    ``scales`` holds dicts with ``deconv`` (in×out×k×k), ``stride``, ``pad``,
    ``wd`` and ``wb`` (out×in) as plain arrays.
    """
    th, tw = target
    total = None
    for f, sc in zip(features, scales):
        up = deconv_scatter(f, sc["deconv"], sc["stride"], sc["pad"])
        if up.shape[1:] != (th, tw):
            up = np.stack([bilinear_sample(ch, th, tw) for ch in up])
        bil = np.stack([bilinear_sample(ch, th, tw) for ch in f])
        term = mix(sc["wd"], up) + mix(sc["wb"], bil)
        total = term if total is None else total + term
    return total


def focal_scalar(probs, labels, gamma, weights, eps=1e-7):
    """Mean over pixels of ``-w_y (1 - p_y)^gamma log p_y``."""
    total = 0.0
    for row, y in zip(probs, labels):
        p = min(max(float(row[y]), eps), 1 - eps)
        total += -weights[y] * (1 - p) ** gamma * math.log(p)
    return total / len(labels)


def metrics_scalar(n):
    """Mean accuracy and mean IoU from a confusion matrix by explicit loops."""
    C = len(n)
    accs, ious = [], []
    for i in range(C):
        t_i = sum(n[i][j] for j in range(C))
        if t_i == 0:
            continue
        col = sum(n[j][i] for j in range(C))
        accs.append(n[i][i] / t_i)
        ious.append(n[i][i] / (t_i + col - n[i][i]))
    return sum(accs) / len(accs), sum(ious) / len(ious)


def adam_scalar(x0, grad_fn, steps, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    x, m, v = float(x0), 0.0, 0.0
    path = []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        x -= lr * mhat / (math.sqrt(vhat) + eps)
        path.append(x)
    return path
