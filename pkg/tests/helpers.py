"""Shared test utilities: finite differences and independent scalar oracles."""

import math

import numpy as np


def numeric_grad(f, arr, eps=1e-5):
    """Central finite differences of scalar f() wrt every element of arr (in place)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gf = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        lp = f()
        flat[i] = orig - eps
        lm = f()
        flat[i] = orig
        gf[i] = (lp - lm) / (2.0 * eps)
    return grad


def max_rel_err(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    assert a.shape == n.shape
    denom = np.maximum(1e-8, np.abs(a) + np.abs(n))
    return float(np.max(np.abs(a - n) / denom))


def scalar_encoder_oracle(p, h_prev, c_prev, x):
    """Independent per-component evaluation of the encoder gate equations."""
    d = p.d
    h_out = np.zeros(d)
    c_out = np.zeros(d)
    for j in range(d):
        pre = {}
        for gate in "fiog":
            s = 0.0
            W_x = getattr(p, f"W_{gate}x")
            W_h = getattr(p, f"W_{gate}h")
            for k in range(len(x)):
                s += W_x[j, k] * x[k]
            for k in range(d):
                s += W_h[j, k] * h_prev[k]
            pre[gate] = s + getattr(p, f"b_{gate}")[j]
        f = 1.0 / (1.0 + math.exp(-pre["f"]))
        i = 1.0 / (1.0 + math.exp(-pre["i"]))
        o = 1.0 / (1.0 + math.exp(-pre["o"]))
        g = math.tanh(pre["g"])
        c_out[j] = f * c_prev[j] + i * g
        h_out[j] = o * math.tanh(c_out[j])
    return h_out, c_out


def scalar_decoder_oracle(p, h_prev, c_prev, z, y):
    """Independent per-component evaluation of the decoder gate equations."""
    d = p.d
    h_out = np.zeros(d)
    c_out = np.zeros(d)
    for j in range(d):
        pre = {}
        for gate in "fiog":
            s = 0.0
            for k in range(d):
                s += getattr(p, f"W_{gate}z")[j, k] * z[k]
            for k in range(d):
                s += getattr(p, f"W_{gate}h")[j, k] * h_prev[k]
            for k in range(len(y)):
                s += getattr(p, f"W_{gate}y")[j, k] * y[k]
            pre[gate] = s + getattr(p, f"b_{gate}")[j]
        f = 1.0 / (1.0 + math.exp(-pre["f"]))
        i = 1.0 / (1.0 + math.exp(-pre["i"]))
        o = 1.0 / (1.0 + math.exp(-pre["o"]))
        g = math.tanh(pre["g"])
        c_out[j] = f * c_prev[j] + i * g
        h_out[j] = o * math.tanh(c_out[j])
    return h_out, c_out


def scalar_attend_oracle(p, h_query, H):
    """Independent evaluation of the attention scorer, softmax, and mixing."""
    m, d = H.shape
    scores = []
    for r in range(m):
        concat = list(h_query) + list(H[r])
        total = 0.0
        for a in range(p.width):
            pre = p.b_a[a]
            for k in range(2 * d):
                pre += p.W_a[a, k] * concat[k]
            total += p.v_a[a] * math.tanh(pre)
        scores.append(total)
    mx = max(scores)
    exps = [math.exp(s - mx) for s in scores]
    norm = sum(exps)
    weights = [e / norm for e in exps]
    context = np.zeros(d)
    for r in range(m):
        context += weights[r] * H[r]
    return context, np.array(weights)
