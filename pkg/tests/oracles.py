"""Independent reference implementations used as test oracles.

Plain Python loops and ``math`` only; nothing here calls into the layer code
under test.
"""

import math

import numpy as np


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def naive_conv1d(x, kernels, bias, stride=1):
    c_out, c_in, k = len(kernels), len(kernels[0]), len(kernels[0][0])
    length = len(x[0])
    l_out = (length - k) // stride + 1
    out = [[0.0] * l_out for _ in range(c_out)]
    for c in range(c_out):
        for t in range(l_out):
            acc = bias[c]
            for i in range(c_in):
                for kk in range(k):
                    acc += kernels[c][i][kk] * x[i][t * stride + kk]
            out[c][t] = acc
    return out


def naive_lstm_cell(x, h, c, w_x, w_h, b):
    hid = len(h)
    z = []
    for r in range(4 * hid):
        acc = b[r]
        for d in range(len(x)):
            acc += w_x[r][d] * x[d]
        for m in range(hid):
            acc += w_h[r][m] * h[m]
        z.append(acc)
    h_new, c_new = [], []
    for j in range(hid):
        i = sigmoid(z[j])
        f = sigmoid(z[hid + j])
        g = math.tanh(z[2 * hid + j])
        o = sigmoid(z[3 * hid + j])
        cj = f * c[j] + i * g
        c_new.append(cj)
        h_new.append(o * math.tanh(cj))
    return h_new, c_new


def naive_lstm(seq, layers):
    """``layers``: list of (w_x, w_h, b). Returns the top layer's last hidden state."""
    xs = [list(row) for row in seq]
    for w_x, w_h, b in layers:
        hid = len(w_h[0])
        h, c = [0.0] * hid, [0.0] * hid
        outs = []
        for x in xs:
            h, c = naive_lstm_cell(x, h, c, w_x, w_h, b)
            outs.append(h)
        xs = outs
    return xs[-1]


def naive_dense(x, w, b):
    return [b[r] + sum(w[r][j] * x[j] for j in range(len(x))) for r in range(len(w))]


def straight_line_forward(model, X, p_target, pixcon=True):
    """Single-device evaluation of a Dom-ST model without splitting into heads.

    Head conv stacks are merged into one block-diagonal conv per layer acting
    on all pixels at once. ``pixcon=False`` drops the Pix-Con scaling.
    """
    cfg = model.config
    P = model.partition
    params = {k: v.tolist() for k, v in model.params.items()}
    members = [P.members(h) for h in range(cfg.heads)]
    order = [p for m in members for p in m]
    if cfg.use_pixcon and pixcon:
        w = {}
        for h, mem in enumerate(members):
            for pos, p in enumerate(mem):
                w[p] = sigmoid(params[f"head{h}.pixcon.logits"][pos])
    else:
        w = {p: 1.0 for p in order}
    x = [[w[p] * float(X[p][t]) for t in range(len(X[p]))] for p in order]

    in_sizes = [len(m) for m in members]
    n_layers = len(cfg.conv_layers)
    for j, spec in enumerate(cfg.conv_layers):
        c_in_total = sum(in_sizes)
        big_k = [[[0.0] * spec.k for _ in range(c_in_total)] for _ in range(cfg.heads * spec.c_out)]
        big_b = []
        in_off = 0
        for h in range(cfg.heads):
            kern = params[f"head{h}.conv{j}.kernels"]
            for c in range(spec.c_out):
                for i in range(in_sizes[h]):
                    big_k[h * spec.c_out + c][in_off + i] = list(kern[c][i])
            big_b.extend(params[f"head{h}.conv{j}.bias"])
            in_off += in_sizes[h]
        x = naive_conv1d(x, big_k, big_b, spec.stride)
        if j < n_layers - 1:
            x = [[v if v > 0 else 0.0 for v in row] for row in x]
        in_sizes = [spec.c_out] * cfg.heads

    seq = [[x[c][t] for c in range(len(x))] for t in range(len(x[0]))]
    layers = [(params[f"lstm.l{n}.w_x"], params[f"lstm.l{n}.w_h"], params[f"lstm.l{n}.b"])
              for n in range(cfg.lstm_layers)]
    z = naive_lstm(seq, layers)
    if cfg.plus_p:
        z = list(z) + [float(v) for v in p_target]
    n_dense = len(cfg.dense_sizes)
    for j in range(n_dense):
        z = naive_dense(z, params[f"dense{j}.weight"], params[f"dense{j}.bias"])
        if j < n_dense - 1:
            z = [v if v > 0 else 0.0 for v in z]
    return z[0]


def sort_and_chunk(distances, n_heads):
    """Reference distance-quantile partition: pixel -> head."""
    order = sorted(range(len(distances)), key=lambda p: (distances[p], p))
    n = len(order)
    out = {}
    start = 0
    for h in range(n_heads):
        size = n // n_heads + (1 if h < n % n_heads else 0)
        for p in order[start : start + size]:
            out[p] = h
        start += size
    return out


def central_difference(f, theta, eps=1e-5):
    theta = np.array(theta, dtype=np.float64)
    g = np.zeros_like(theta)
    for j in range(theta.size):
        tp = theta.copy()
        tm = theta.copy()
        tp.flat[j] += eps
        tm.flat[j] -= eps
        g.flat[j] = (f(tp) - f(tm)) / (2 * eps)
    return g
