"""Independent slow reference implementations used as test oracles."""

import math

import numpy as np


def conv_oracle(x, weights, bias, support):
    """Nested-loop cross-correlation with zero padding: out[o,r,c] = sum f[i, r+tr, c+tc] w[o,i,t] + b[o]."""
    c_in, h, w = x.shape
    out = np.zeros((weights.shape[0], h, w))
    for o in range(weights.shape[0]):
        for r in range(h):
            for c in range(w):
                acc = bias[o]
                for i in range(c_in):
                    for t, (tr, tc) in enumerate(support):
                        rr, cc = r + int(tr), c + int(tc)
                        if 0 <= rr < h and 0 <= cc < w:
                            acc += x[i, rr, cc] * weights[o, i, t]
                out[o, r, c] = acc
    return out


def conv_weight_grad_oracle(x, upstream, support):
    c_in, h, w = x.shape
    o_ch = upstream.shape[0]
    g = np.zeros((o_ch, c_in, len(support)))
    for o in range(o_ch):
        for i in range(c_in):
            for t, (tr, tc) in enumerate(support):
                for r in range(h):
                    for c in range(w):
                        rr, cc = r + int(tr), c + int(tc)
                        if 0 <= rr < h and 0 <= cc < w:
                            g[o, i, t] += upstream[o, r, c] * x[i, rr, cc]
    return g


def bilinear_oracle(img, y):
    """Direct sum over the whole grid of g(y0, m0) g(y1, m1) img[m]."""
    h, w = img.shape
    total = 0.0
    for m0 in range(h):
        for m1 in range(w):
            k = max(0.0, 1 - abs(y[0] - m0)) * max(0.0, 1 - abs(y[1] - m1))
            total += k * img[m0, m1]
    return total


def simconv_oracle(x, weights, bias, support, matrices, quad_weight=1.0):
    """Per-pixel loop over the discretized similarity convolution."""
    c_in, h, w = x.shape
    out = np.zeros((weights.shape[0], h, w))
    for r in range(h):
        for c in range(w):
            M = matrices[r, c]
            taps = []
            for tr, tc in support:
                y = (r + M[0, 0] * tr + M[0, 1] * tc, c + M[1, 0] * tr + M[1, 1] * tc)
                taps.append([bilinear_oracle(x[i], y) for i in range(c_in)])
            taps = np.array(taps)  # (n, c_in)
            for o in range(weights.shape[0]):
                out[o, r, c] = quad_weight * np.sum(taps.T * weights[o]) + bias[o]
    return out


def sim_matrix(s, theta, t):
    """3x3 homogeneous A_s Y_t R_theta built from scratch."""
    A = np.diag([s, s, 1.0])
    Y = np.array([[1, 0, t[0]], [0, 1, t[1]], [0, 0, 1.0]])
    c, sn = math.cos(theta), math.sin(theta)
    R = np.array([[c, sn, 0], [-sn, c, 0], [0, 0, 1.0]])
    return A @ Y @ R
