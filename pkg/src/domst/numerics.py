"""Dense float64 layers with hand-written backward passes.

Every forward function returns ``(output, cache)`` and the matching backward
consumes that cache. Tensors are plain C-ordered ``np.float64`` arrays.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Mapping, MutableMapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import NonFiniteError, ShapeError

Array = np.ndarray


def as_tensor(x, where: str = "tensor") -> Array:
    arr = np.ascontiguousarray(x, dtype=np.float64)
    check_finite(arr, where)
    return arr


def check_finite(arr: Array, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{where}: non-finite values")


# --------------------------------------------------------------------------- RNG


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Philox stream keyed by (seed, name), independent of creation order."""
    key = zlib.crc32(name.encode("utf-8"))
    ss = np.random.SeedSequence(int(seed), spawn_key=(key,))
    return np.random.Generator(np.random.Philox(ss))


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> Array:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ------------------------------------------------------------------------ conv1d


@dataclass
class Conv1DParams:
    kernels: Array  # [C_out, C_in, K]
    bias: Array  # [C_out]
    stride: int = 1

    def __post_init__(self):
        if self.kernels.ndim != 3:
            raise ShapeError("conv1d kernels", ("C_out", "C_in", "K"), self.kernels.shape)
        c_out, c_in, k = self.kernels.shape
        if min(c_out, c_in, k) < 1:
            raise ShapeError("conv1d kernels", "all dims >= 1", self.kernels.shape)
        if self.bias.shape != (c_out,):
            raise ShapeError("conv1d bias", (c_out,), self.bias.shape)
        if int(self.stride) < 1:
            raise ValueError(f"conv1d stride must be positive, got {self.stride}")


def conv1d_output_length(length: int, k: int, stride: int = 1) -> int:
    return (length - k) // stride + 1


def conv1d_forward(x: Array, params: Conv1DParams):
    """Valid cross-correlation: ``out[c,t] = b[c] + sum_{i,k} W[c,i,k] x[i, t*s+k]``."""
    x = np.asarray(x, dtype=np.float64)
    c_out, c_in, k = params.kernels.shape
    if x.ndim != 2 or x.shape[0] != c_in:
        raise ShapeError("conv1d input", (c_in, "L"), x.shape)
    length = x.shape[1]
    if length < k:
        raise ShapeError("conv1d input", (c_in, f">={k}"), x.shape, "window longer than input")
    s = params.stride
    l_out = conv1d_output_length(length, k, s)
    windows = sliding_window_view(x, k, axis=1)[:, ::s][:, :l_out]  # [C_in, L_out, K]
    cols = windows.transpose(0, 2, 1).reshape(c_in * k, l_out)
    out = params.kernels.reshape(c_out, c_in * k) @ cols + params.bias[:, None]
    return out, (cols, length, params)


def conv1d_backward(cache, grad_out: Array):
    cols, length, params = cache
    c_out, c_in, k = params.kernels.shape
    s = params.stride
    l_out = cols.shape[1]
    if grad_out.shape != (c_out, l_out):
        raise ShapeError("conv1d grad_output", (c_out, l_out), grad_out.shape)
    grad_w = (grad_out @ cols.T).reshape(c_out, c_in, k)
    grad_b = grad_out.sum(axis=1)
    grad_cols = (params.kernels.reshape(c_out, c_in * k).T @ grad_out).reshape(c_in, k, l_out)
    grad_x = np.zeros((c_in, length))
    span = s * (l_out - 1) + 1
    for kk in range(k):
        grad_x[:, kk : kk + span : s] += grad_cols[:, kk, :]
    return grad_x, {"kernels": grad_w, "bias": grad_b}


# -------------------------------------------------------------------------- LSTM


@dataclass
class LSTMLayer:
    w_x: Array  # [4H, D_in], gate rows ordered i, f, g, o
    w_h: Array  # [4H, H]
    b: Array  # [4H]


@dataclass
class LSTMParams:
    layers: list[LSTMLayer]

    @property
    def hidden_size(self) -> int:
        return self.layers[0].w_h.shape[1]

    @property
    def input_size(self) -> int:
        return self.layers[0].w_x.shape[1]

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("lstm", "num_layers >= 1", 0)
        hid = self.layers[0].w_h.shape[1]
        d_in = self.layers[0].w_x.shape[1]
        for n, layer in enumerate(self.layers):
            exp_in = d_in if n == 0 else hid
            if layer.w_x.shape != (4 * hid, exp_in):
                raise ShapeError(f"lstm layer {n} w_x", (4 * hid, exp_in), layer.w_x.shape)
            if layer.w_h.shape != (4 * hid, hid):
                raise ShapeError(f"lstm layer {n} w_h", (4 * hid, hid), layer.w_h.shape)
            if layer.b.shape != (4 * hid,):
                raise ShapeError(f"lstm layer {n} b", (4 * hid,), layer.b.shape)


def _lstm_layer_forward(seq: Array, layer: LSTMLayer):
    steps = seq.shape[0]
    hid = layer.w_h.shape[1]
    zx = seq @ layer.w_x.T + layer.b  # input contribution for all steps at once
    h_all = np.zeros((steps + 1, hid))  # row 0 is the initial state
    c_all = np.zeros((steps + 1, hid))
    gates = np.empty((steps, 4 * hid))
    w_h_t = layer.w_h.T
    for t in range(steps):
        z = zx[t] + h_all[t] @ w_h_t
        gt = gates[t]
        gt[:] = expit(z)
        gt[2 * hid : 3 * hid] = np.tanh(z[2 * hid : 3 * hid])
        c = gt[hid : 2 * hid] * c_all[t] + gt[:hid] * gt[2 * hid : 3 * hid]
        c_all[t + 1] = c
        h_all[t + 1] = gt[3 * hid :] * np.tanh(c)
    return h_all, (seq, h_all, c_all, gates)


def lstm_forward(seq: Array, params: LSTMParams):
    """Stacked LSTM over a time-major sequence ``[L, D_in]``.

    Returns the top layer's hidden sequence, its last hidden state and a cache.
    """
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[1] != params.input_size or seq.shape[0] < 1:
        raise ShapeError("lstm input", ("L>=1", params.input_size), seq.shape)
    caches = []
    x = seq
    for layer in params.layers:
        h_all, cache = _lstm_layer_forward(x, layer)
        caches.append(cache)
        x = h_all[1:]
    return x, x[-1].copy(), (params, caches)


def lstm_backward(cache, grad_last_hidden: Array):
    """Backprop from the top layer's last hidden state only."""
    params, caches = cache
    hid = params.hidden_size
    grad_last_hidden = np.asarray(grad_last_hidden, dtype=np.float64)
    if grad_last_hidden.shape != (hid,):
        raise ShapeError("lstm grad_last_hidden", (hid,), grad_last_hidden.shape)
    steps = caches[0][0].shape[0]
    upstream = np.zeros((steps, hid))
    upstream[-1] = grad_last_hidden
    grads: list[dict] = [None] * len(params.layers)  # type: ignore[list-item]
    for n in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[n]
        seq, h_all, c_all, gates = caches[n]
        dz = np.empty((steps, 4 * hid))
        dh_rec = np.zeros(hid)
        dc_rec = np.zeros(hid)
        w_h = layer.w_h
        for t in range(steps - 1, -1, -1):
            i = gates[t, :hid]
            f = gates[t, hid : 2 * hid]
            g = gates[t, 2 * hid : 3 * hid]
            o = gates[t, 3 * hid :]
            tc = np.tanh(c_all[t + 1])
            dh = upstream[t] + dh_rec
            dc = dc_rec + dh * o * (1.0 - tc * tc)
            dz[t, :hid] = dc * g * i * (1.0 - i)
            dz[t, hid : 2 * hid] = dc * c_all[t] * f * (1.0 - f)
            dz[t, 2 * hid : 3 * hid] = dc * i * (1.0 - g * g)
            dz[t, 3 * hid :] = dh * tc * o * (1.0 - o)
            dc_rec = dc * f
            dh_rec = dz[t] @ w_h
        grads[n] = {
            "w_x": dz.T @ seq,
            "w_h": dz.T @ h_all[:-1],
            "b": dz.sum(axis=0),
        }
        upstream = dz @ layer.w_x
    return upstream, grads


# ------------------------------------------------------------------------- dense


@dataclass
class DenseParams:
    weight: Array  # [out, in]
    bias: Array  # [out]

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError("dense params", "weight [out, in] with bias [out]",
                             (self.weight.shape, self.bias.shape))


def dense_forward(x: Array, params: DenseParams):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.weight.shape[1],):
        raise ShapeError("dense input", (params.weight.shape[1],), x.shape)
    return params.weight @ x + params.bias, (x, params)


def dense_backward(cache, grad_y: Array):
    x, params = cache
    if grad_y.shape != (params.weight.shape[0],):
        raise ShapeError("dense grad_y", (params.weight.shape[0],), grad_y.shape)
    return params.weight.T @ grad_y, {"weight": np.outer(grad_y, x), "bias": grad_y.copy()}


def relu_forward(x: Array):
    mask = x > 0
    return x * mask, mask


def relu_backward(mask: Array, grad: Array) -> Array:
    return grad * mask


# -------------------------------------------------------------------------- loss


def mse_loss(pred, target):
    pred = np.atleast_1d(np.asarray(pred, dtype=np.float64))
    target = np.atleast_1d(np.asarray(target, dtype=np.float64))
    if pred.shape != target.shape:
        raise ShapeError("mse_loss", pred.shape, target.shape, "pred/target length mismatch")
    if pred.size == 0:
        raise ValueError("mse_loss of zero elements")
    diff = pred - target
    n = diff.size
    return float(diff @ diff) / n, (2.0 / n) * diff


# -------------------------------------------------------------------------- adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "t": self.t,
            "m": {k: a.copy() for k, a in self.m.items()},
            "v": {k: a.copy() for k, a in self.v.items()},
        }


def adam_step(params: MutableMapping[str, Array], grads: Mapping[str, Array], state: AdamState):
    """One bias-corrected Adam update, applied in place to ``params``.

    Only names present in ``grads`` are touched, so a worker can step its own
    shard with a state holding just that shard's moments.
    """
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam grad {name}", p.shape, g.shape)
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        elif state.m[name].shape != p.shape:
            raise ShapeError(f"adam state {name}", p.shape, state.m[name].shape)
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[name] -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


# ------------------------------------------------------------- gradient checking


def relative_error(a, b, floor: float = 1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numerical_gradient(loss_fn: Callable[[], float], params: MutableMapping[str, Array], eps: float = 1e-5):
    """Central differences of ``loss_fn()`` with respect to every entry of ``params``.

    Entries are perturbed in place and restored bit-exactly.
    """
    out = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        flat = p.reshape(-1)  # view
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = loss_fn()
            flat[j] = orig - eps
            fm = loss_fn()
            flat[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"finite-difference loss non-finite at {name}[{j}]")
            gflat[j] = (fp - fm) / (2.0 * eps)
        out[name] = g
    return out


def finite_diff_check(loss_fn: Callable[[], float], params: MutableMapping[str, Array],
                      grads: Mapping[str, Array], eps: float = 1e-5, detail: bool = False):
    """Max element-wise relative error between ``grads`` and central differences.

    ``loss_fn`` must read ``params`` (the same array objects) on every call.
    With ``detail=True`` a ``(max_err, per_tensor_max)`` pair is returned.
    """
    f0 = loss_fn()
    if not np.isfinite(f0):
        raise NonFiniteError("finite_diff_check: loss is non-finite")
    numeric = numerical_gradient(loss_fn, params, eps)
    per_tensor = {}
    for name, g_num in numeric.items():
        g = np.asarray(grads[name])
        if g.shape != g_num.shape:
            raise ShapeError(f"gradient {name}", g_num.shape, g.shape)
        per_tensor[name] = float(relative_error(g, g_num).max()) if g.size else 0.0
    worst = max(per_tensor.values(), default=0.0)
    return (worst, per_tensor) if detail else worst
