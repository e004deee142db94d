"""Dom-ST model: Pix-Con shards, multihead 1D-CNN spatial block, LSTM temporal block.

Parameters live in one flat ``name -> array`` dict. Names carry their owner:
``head{h}.*`` tensors belong to spatial head ``h``; everything else
(``lstm.*``, ``dense*``) belongs to the temporal block. Executors shard the
dict by that prefix.

The forward pass is split at the device boundary into :func:`head_forward`
and :func:`temporal_forward` so the sequential and distributed executors run
the exact same arithmetic.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .data import Sample
from .errors import ConfigError, ShapeError
from .pixcon import (
    PixConParams,
    PixelMeta,
    PixelPartition,
    default_tau,
    init_pixcon,
    moved_pixels,
    partition_pixels,
    pixcon_apply,
    pixcon_backward,
)

VARIANTS = ("singlehead", "singlehead_plus_p", "multihead_plus_p")
CHECKPOINT_FORMAT = "domst-checkpoint"
CHECKPOINT_VERSION = 1

__all__ = [
    "VARIANTS", "ConvSpec", "ModelConfig", "DomSTModel", "Gradients", "Sample",
    "build_model", "forward", "backward", "predict_series", "head_forward", "head_backward",
    "temporal_forward", "temporal_backward", "owner_of", "save_checkpoint", "load_checkpoint",
    "params_digest", "migrate_partition", "migrate_tensors",
]


@dataclass(frozen=True)
class ConvSpec:
    c_out: int
    k: int
    stride: int = 1


def _as_conv_specs(layers) -> tuple[ConvSpec, ...]:
    out = []
    for spec in layers:
        if isinstance(spec, ConvSpec):
            out.append(spec)
        elif isinstance(spec, dict):
            out.append(ConvSpec(**spec))
        else:
            out.append(ConvSpec(*spec))
    return tuple(out)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of one Dom-ST variant.

    ``heads`` and ``use_pixcon`` default per variant: singlehead variants have
    one head and no Pix-Con; ``multihead_plus_p`` has Pix-Con and 4 heads.
    """

    variant: str = "multihead_plus_p"
    heads: int | None = None
    conv_layers: tuple = (ConvSpec(8, 5), ConvSpec(16, 5))
    lstm_hidden: int = 32
    lstm_layers: int = 1
    dense_sizes: tuple = (32, 1)
    lookback: int = 30
    use_pixcon: bool | None = None
    seed: int = 0
    partition_strategy: str = "distance-quantile"
    tau_km: float | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        single = self.variant != "multihead_plus_p"
        heads = self.heads if self.heads is not None else (1 if single else 4)
        use_pixcon = self.use_pixcon if self.use_pixcon is not None else not single
        if single and heads != 1:
            raise ConfigError(f"{self.variant} requires heads=1, got {heads}")
        if single and use_pixcon:
            raise ConfigError(f"{self.variant} has no Pix-Con block")
        if not single and not use_pixcon:
            raise ConfigError("multihead_plus_p requires the Pix-Con block")
        object.__setattr__(self, "heads", int(heads))
        object.__setattr__(self, "use_pixcon", bool(use_pixcon))
        object.__setattr__(self, "conv_layers", _as_conv_specs(self.conv_layers))
        object.__setattr__(self, "dense_sizes", tuple(int(s) for s in self.dense_sizes))
        if not self.conv_layers:
            raise ConfigError("at least one conv layer per head is required")
        if any(s.c_out < 1 or s.k < 1 or s.stride < 1 for s in self.conv_layers):
            raise ConfigError(f"invalid conv layers {self.conv_layers}")
        if self.lstm_hidden < 1 or self.lstm_layers < 1:
            raise ConfigError("lstm_hidden and lstm_layers must be >= 1")
        if not self.dense_sizes or self.dense_sizes[-1] != 1 or min(self.dense_sizes) < 1:
            raise ConfigError(f"dense_sizes must be positive and end in 1, got {self.dense_sizes}")
        if self.heads < 1:
            raise ConfigError("heads must be >= 1")
        if self.conv_output_length() < 1:
            raise ConfigError(f"lookback {self.lookback} too short for conv stack {self.conv_layers}")

    @property
    def plus_p(self) -> bool:
        return self.variant != "singlehead"

    def conv_output_length(self) -> int:
        length = self.lookback
        for spec in self.conv_layers:
            if length < spec.k:
                return 0
            length = nx.conv1d_output_length(length, spec.k, spec.stride)
        return length

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_layers"] = [[s.c_out, s.k, s.stride] for s in self.conv_layers]
        d["dense_sizes"] = list(self.dense_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def with_seed(self, seed: int) -> "ModelConfig":
        return replace(self, seed=int(seed))


@dataclass
class DomSTModel:
    config: ModelConfig
    partition: PixelPartition
    params: dict = field(repr=False)

    @property
    def n_pixels(self) -> int:
        return self.partition.n_pixels

    @property
    def n_heads(self) -> int:
        return self.config.heads

    def head_names(self, h: int) -> list[str]:
        prefix = f"head{h}."
        return [n for n in self.params if n.startswith(prefix)]

    def temporal_names(self) -> list[str]:
        return [n for n in self.params if not n.startswith("head")]

    def pixcon_weights(self) -> np.ndarray:
        """Full ``[P]`` effective Pix-Con weights assembled from the head shards."""
        if not self.config.use_pixcon:
            raise ConfigError(f"{self.config.variant} has no Pix-Con block")
        w = np.empty(self.n_pixels)
        for h in range(self.n_heads):
            w[self.partition.members(h)] = PixConParams(self.params[f"head{h}.pixcon.logits"]).weights
        return w

    def copy(self) -> "DomSTModel":
        return DomSTModel(self.config, self.partition, {k: v.copy() for k, v in self.params.items()})


@dataclass
class Gradients:
    params: dict
    X: np.ndarray
    p_target: np.ndarray | None


def owner_of(name: str) -> str:
    """Logical device owning parameter ``name``: ``head{h}`` or ``temporal``."""
    return name.split(".", 1)[0] if name.startswith("head") else "temporal"


# -------------------------------------------------------------------- building


def build_model(config: ModelConfig, meta: Sequence[PixelMeta]) -> DomSTModel:
    n_pix = len(meta)
    if config.heads > n_pix:
        raise ConfigError(f"{config.heads} heads but only {n_pix} pixels")
    partition = partition_pixels(meta, config.heads, config.partition_strategy)
    seed = config.seed
    params: dict[str, np.ndarray] = {}

    if config.use_pixcon:
        dist = np.array([m.distance_km for m in sorted(meta, key=lambda m: m.pixel_id)])
        tau = config.tau_km if config.tau_km is not None else default_tau(dist)
        logits = init_pixcon(dist, tau).logits
    for h in range(config.heads):
        members = partition.members(h)
        if config.use_pixcon:
            params[f"head{h}.pixcon.logits"] = logits[members].copy()
        c_in = len(members)
        for j, spec in enumerate(config.conv_layers):
            name = f"head{h}.conv{j}"
            rng = nx.param_rng(seed, name + ".kernels")
            params[name + ".kernels"] = nx.glorot_uniform(
                rng, (spec.c_out, c_in, spec.k), c_in * spec.k, spec.c_out * spec.k)
            params[name + ".bias"] = np.zeros(spec.c_out)
            c_in = spec.c_out

    hid = config.lstm_hidden
    d_in = config.heads * config.conv_layers[-1].c_out
    for n in range(config.lstm_layers):
        name = f"lstm.l{n}"
        params[name + ".w_x"] = nx.glorot_uniform(nx.param_rng(seed, name + ".w_x"), (4 * hid, d_in), d_in, 4 * hid)
        params[name + ".w_h"] = nx.glorot_uniform(nx.param_rng(seed, name + ".w_h"), (4 * hid, hid), hid, 4 * hid)
        b = np.zeros(4 * hid)
        b[hid : 2 * hid] = 1.0  # forget gate
        params[name + ".b"] = b
        d_in = hid

    d_in = hid + (n_pix if config.plus_p else 0)
    for j, d_out in enumerate(config.dense_sizes):
        name = f"dense{j}"
        params[name + ".weight"] = nx.glorot_uniform(nx.param_rng(seed, name + ".weight"), (d_out, d_in), d_in, d_out)
        params[name + ".bias"] = np.zeros(d_out)
        d_in = d_out
    return DomSTModel(config, partition, params)


# --------------------------------------------------------------------- forward


def shard_input(partition: PixelPartition, X: np.ndarray) -> list[np.ndarray]:
    return [X[partition.members(h)] for h in range(partition.n_heads)]


def head_forward(config: ModelConfig, params, h: int, x_h: np.ndarray):
    """Pix-Con shard then conv stack (ReLU between layers) for head ``h``."""
    caches = []
    x = x_h
    pc_cache = None
    if config.use_pixcon:
        x, pc_cache = pixcon_apply(x, PixConParams(params[f"head{h}.pixcon.logits"]))
    last = len(config.conv_layers) - 1
    for j, spec in enumerate(config.conv_layers):
        conv = nx.Conv1DParams(params[f"head{h}.conv{j}.kernels"], params[f"head{h}.conv{j}.bias"], spec.stride)
        try:
            x, cc = nx.conv1d_forward(x, conv)
        except ShapeError as exc:
            raise ShapeError(f"head {h} conv{j}", exc.expected, exc.actual) from exc
        mask = None
        if j < last:
            x, mask = nx.relu_forward(x)
        caches.append((cc, mask))
    nx.check_finite(x, f"head {h} output")
    return x, (pc_cache, caches)


def head_backward(config: ModelConfig, params, h: int, cache, grad_out: np.ndarray):
    pc_cache, caches = cache
    grads = {}
    g = grad_out
    for j in range(len(config.conv_layers) - 1, -1, -1):
        cc, mask = caches[j]
        if mask is not None:
            g = nx.relu_backward(mask, g)
        g, cg = nx.conv1d_backward(cc, g)
        grads[f"head{h}.conv{j}.kernels"] = cg["kernels"]
        grads[f"head{h}.conv{j}.bias"] = cg["bias"]
    if pc_cache is not None:
        g, g_logits = pixcon_backward(pc_cache, g)
        grads[f"head{h}.pixcon.logits"] = g_logits
    return grads, g


def _lstm_params(config: ModelConfig, params) -> nx.LSTMParams:
    return nx.LSTMParams([
        nx.LSTMLayer(params[f"lstm.l{n}.w_x"], params[f"lstm.l{n}.w_h"], params[f"lstm.l{n}.b"])
        for n in range(config.lstm_layers)
    ])


def temporal_forward(config: ModelConfig, params, head_outputs: Sequence[np.ndarray], p_target):
    """Concat head outputs (head-index order), LSTM, optional +P concat, dense stack."""
    if len(head_outputs) != config.heads:
        raise ShapeError("temporal block", f"{config.heads} head outputs", len(head_outputs))
    merged = np.concatenate(head_outputs, axis=0)  # [C_total, L_out]
    seq = merged.T
    try:
        _, z, lstm_cache = nx.lstm_forward(seq, _lstm_params(config, params))
    except ShapeError as exc:
        raise ShapeError("temporal block lstm", exc.expected, exc.actual) from exc
    n_hid = z.shape[0]
    if config.plus_p:
        p_target = np.asarray(p_target, dtype=np.float64)
        z = np.concatenate([z, p_target])
    caches = []
    last = len(config.dense_sizes) - 1
    for j in range(len(config.dense_sizes)):
        dp = nx.DenseParams(params[f"dense{j}.weight"], params[f"dense{j}.bias"])
        try:
            z, dc = nx.dense_forward(z, dp)
        except ShapeError as exc:
            raise ShapeError(f"temporal block dense{j}", exc.expected, exc.actual) from exc
        mask = None
        if j < last:
            z, mask = nx.relu_forward(z)
        caches.append((dc, mask))
    pred = float(z[0])
    if not np.isfinite(pred):
        raise nx.NonFiniteError("temporal block: non-finite prediction")
    shapes = [o.shape[0] for o in head_outputs]
    return pred, (lstm_cache, caches, n_hid, shapes, merged.shape[1])


def temporal_backward(config: ModelConfig, params, cache, grad_pred: float):
    lstm_cache, caches, n_hid, shapes, l_out = cache
    grads = {}
    g = np.array([float(grad_pred)])
    for j in range(len(caches) - 1, -1, -1):
        dc, mask = caches[j]
        if mask is not None:
            g = nx.relu_backward(mask, g)
        g, dg = nx.dense_backward(dc, g)
        grads[f"dense{j}.weight"] = dg["weight"]
        grads[f"dense{j}.bias"] = dg["bias"]
    grad_p = g[n_hid:].copy() if config.plus_p else None
    grad_seq, lstm_grads = nx.lstm_backward(lstm_cache, g[:n_hid])
    for n, lg in enumerate(lstm_grads):
        for k, v in lg.items():
            grads[f"lstm.l{n}.{k}"] = v
    grad_merged = grad_seq.T
    head_grads = []
    start = 0
    for c in shapes:
        head_grads.append(np.ascontiguousarray(grad_merged[start : start + c]))
        start += c
    return grads, head_grads, grad_p


@dataclass
class ModelCache:
    head_caches: list
    temporal_cache: tuple
    n_pixels: int
    lookback: int
    params_id: int


def _check_sample(model: DomSTModel, X, p_target):
    X = np.asarray(X, dtype=np.float64)
    exp = (model.n_pixels, model.config.lookback)
    if X.shape != exp:
        raise ShapeError("sample X", exp, X.shape)
    if model.config.plus_p:
        p_target = np.asarray(p_target, dtype=np.float64)
        if p_target.shape != (model.n_pixels,):
            raise ShapeError("sample p_target", (model.n_pixels,), p_target.shape)
    return X, p_target


def forward(model: DomSTModel, sample):
    X, p_target = _check_sample(model, sample.X, sample.p_target)
    cfg = model.config
    outs, head_caches = [], []
    for h, x_h in enumerate(shard_input(model.partition, X)):
        out, hc = head_forward(cfg, model.params, h, x_h)
        outs.append(out)
        head_caches.append(hc)
    pred, tc = temporal_forward(cfg, model.params, outs, p_target)
    return pred, ModelCache(head_caches, tc, model.n_pixels, cfg.lookback, id(model.params))


def backward(model: DomSTModel, cache: ModelCache, grad_prediction: float) -> Gradients:
    if not isinstance(cache, ModelCache) or cache.params_id != id(model.params) or cache.n_pixels != model.n_pixels:
        raise ShapeError("backward", "cache from a forward call on this model", type(cache).__name__)
    cfg = model.config
    grads, head_grads, grad_p = temporal_backward(cfg, model.params, cache.temporal_cache, grad_prediction)
    grad_X = np.zeros((model.n_pixels, cfg.lookback))
    for h in range(cfg.heads):
        hg, gx = head_backward(cfg, model.params, h, cache.head_caches[h], head_grads[h])
        grads.update(hg)
        grad_X[model.partition.members(h)] = gx
    ordered = {name: grads[name] for name in model.params}
    return Gradients(ordered, grad_X, grad_p)


def predict_series(model: DomSTModel, samples: Iterable) -> np.ndarray:
    return np.array([forward(model, s)[0] for s in samples], dtype=np.float64)


# ---------------------------------------------------------------- repartition


def migrate_tensors(tensors: dict, old: PixelPartition, new: PixelPartition, carry_kernels: bool = False) -> dict:
    """Re-shard per-pixel tensors after a partition change.

    Applies to parameters and to optimizer moments alike. A moved pixel's
    Pix-Con logit travels with it; its first-layer kernel column is dropped
    from the old head and a zero column is opened in the new head.
    """
    out = {k: v for k, v in tensors.items()}
    current = old
    for pixel, src, dst in moved_pixels(old, new):
        src_members = current.members(src)
        assignment = list(current.assignment)
        assignment[pixel] = dst
        nxt = PixelPartition(tuple(assignment), current.n_heads, current.order, current.strategy)
        i_src = src_members.index(pixel)
        i_dst = nxt.members(dst).index(pixel)
        k_src, k_dst = f"head{src}.conv0.kernels", f"head{dst}.conv0.kernels"
        if k_src in out:
            column = out[k_src][:, i_src : i_src + 1, :]
            fill = column if carry_kernels else np.zeros_like(column)
            out[k_src] = np.delete(out[k_src], i_src, axis=1)
            out[k_dst] = np.insert(out[k_dst], i_dst, fill[:, 0, :], axis=1)
        l_src, l_dst = f"head{src}.pixcon.logits", f"head{dst}.pixcon.logits"
        if l_src in out:
            val = out[l_src][i_src]
            out[l_src] = np.delete(out[l_src], i_src)
            out[l_dst] = np.insert(out[l_dst], i_dst, val)
        current = nxt
    return out


def migrate_partition(model: DomSTModel, new: PixelPartition) -> DomSTModel:
    params = migrate_tensors(model.params, model.partition, new)
    ordered = {k: np.ascontiguousarray(params[k]) for k in model.params}
    return DomSTModel(model.config, new, ordered)


# ----------------------------------------------------------------- checkpoints


def params_digest(params: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype=np.float64)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def checkpoint_dict(model: DomSTModel) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "partition": model.partition.to_dict(),
        "params": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()} for k, v in model.params.items()},
    }


def model_from_dict(d: dict) -> DomSTModel:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a domst checkpoint")
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('version')}")
    params = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in d["params"].items()}
    return DomSTModel(ModelConfig.from_dict(d["config"]), PixelPartition.from_dict(d["partition"]), params)


def save_checkpoint(model: DomSTModel, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(checkpoint_dict(model)))
    return path


def load_checkpoint(path) -> DomSTModel:
    return model_from_dict(json.loads(Path(path).read_text()))
