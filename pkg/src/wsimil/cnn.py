"""Small reference CNN with hand-written forward and backward passes.

Body: ``len(conv_channels)`` blocks of 3x3 convolution (stride 2, padding 1)
followed by ReLU. Head: global average pool, one dense unit, sigmoid.
Tensors are NHWC; conv kernels are stored as (3, 3, C_in, C_out).
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError, LoadError, StateError

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8
TRAIN_CLIP = 1e-7

BASE_LR = 0.001
LR_DECAY = 0.95
LR_EVERY = 2

# pretext task: its own faster schedule, independent of the target task
PRETEXT_EPOCHS = 20
PRETEXT_BATCH = 32
PRETEXT_LR = 0.004
PRETEXT_DECAY = 0.88


@dataclass(frozen=True)
class ArchSpec:
    input_size: int = 64
    conv_channels: tuple[int, ...] = (16, 32, 64)
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if self.input_size < 1 or not self.conv_channels or min(self.conv_channels) < 1:
            raise ConfigError(f"invalid architecture {self}")

    def spatial_sizes(self) -> list[int]:
        sizes = [self.input_size]
        for _ in self.conv_channels:
            sizes.append((sizes[-1] + 1) // 2)
        return sizes

    @property
    def final_size(self) -> int:
        return self.spatial_sizes()[-1]

    @property
    def layer_names(self) -> list[str]:
        return [f"conv{i}" for i in range(len(self.conv_channels))] + ["head"]

    def to_json(self) -> dict:
        return {"input_size": self.input_size, "conv_channels": list(self.conv_channels), "in_channels": self.in_channels}


def glorot_limit(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def glorot_uniform(shape: tuple[int, ...], rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Keras convention: conv fans are receptive field x channels."""
    if len(shape) == 2:
        fan_in, fan_out = shape
    else:
        receptive = int(np.prod(shape[:-2]))
        fan_in, fan_out = shape[-2] * receptive, shape[-1] * receptive
    lim = glorot_limit(fan_in, fan_out)
    return rng.uniform(-lim, lim, size=shape).astype(dtype)


@dataclass
class ModelParams:
    """Parameters, per-layer trainable flags and Adam state.

    ``params`` maps ``"<layer>.w"`` / ``"<layer>.b"`` to arrays in declaration
    order. Adam moments mirror ``params``; ``steps`` counts updates per layer
    so a layer frozen for a while starts its bias correction from zero.
    """

    arch: ArchSpec
    params: dict[str, np.ndarray]
    trainable: dict[str, bool]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        for k, p in self.params.items():
            self.m.setdefault(k, np.zeros_like(p))
            self.v.setdefault(k, np.zeros_like(p))
        for layer in self.arch.layer_names:
            self.steps.setdefault(layer, 0)

    @property
    def dtype(self):
        return self.params["head.w"].dtype

    def copy(self) -> ModelParams:
        return ModelParams(
            self.arch,
            {k: v.copy() for k, v in self.params.items()},
            dict(self.trainable),
            {k: v.copy() for k, v in self.m.items()},
            {k: v.copy() for k, v in self.v.items()},
            dict(self.steps),
        )

    def astype(self, dtype) -> ModelParams:
        out = self.copy()
        for d in (out.params, out.m, out.v):
            for k in d:
                d[k] = d[k].astype(dtype)
        return out


def _param_shapes(arch: ArchSpec) -> dict[str, tuple[int, ...]]:
    shapes = {}
    cin = arch.in_channels
    for i, cout in enumerate(arch.conv_channels):
        shapes[f"conv{i}.w"] = (3, 3, cin, cout)
        shapes[f"conv{i}.b"] = (cout,)
        cin = cout
    shapes["head.w"] = (cin, 1)
    shapes["head.b"] = (1,)
    return shapes


def init_model(arch: ArchSpec, rng: np.random.Generator, dtype=np.float32) -> ModelParams:
    """Glorot-uniform weights, zero biases, zeroed Adam state, all layers trainable."""
    if arch.final_size < 1:
        raise ConfigError(f"architecture collapses to zero spatial size: {arch}")
    params = {}
    for name, shape in _param_shapes(arch).items():
        if name.endswith(".w"):
            params[name] = glorot_uniform(shape, rng, dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return ModelParams(arch, params, {layer: True for layer in arch.layer_names})


def init_head(params: ModelParams, rng: np.random.Generator) -> ModelParams:
    """Re-draw the classification layer (Glorot) and reset its Adam state."""
    shape = params.params["head.w"].shape
    params.params["head.w"] = glorot_uniform(shape, rng, params.dtype)
    params.params["head.b"] = np.zeros(1, dtype=params.dtype)
    for k in ("head.w", "head.b"):
        params.m[k] = np.zeros_like(params.params[k])
        params.v[k] = np.zeros_like(params.params[k])
    params.steps["head"] = 0
    return params


# -- layer primitives --------------------------------------------------------


def _out_size(n: int) -> int:
    return (n + 1) // 2


def im2col(x: np.ndarray) -> np.ndarray:
    """(B, H, W, C) -> (B, Ho, Wo, 9*C) patches for a 3x3 / stride 2 / pad 1 conv."""
    b, h, w, c = x.shape
    ho, wo = _out_size(h), _out_size(w)
    xp = np.zeros((b, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1 : h + 1, 1 : w + 1] = x
    cols = np.empty((b, ho, wo, 9, c), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, :, 3 * i + j] = xp[:, i : i + 2 * ho - 1 : 2, j : j + 2 * wo - 1 : 2]
    return cols.reshape(b, ho, wo, 9 * c)


def col2im(dcols: np.ndarray, h: int, w: int) -> np.ndarray:
    b, ho, wo, k = dcols.shape
    c = k // 9
    d = dcols.reshape(b, ho, wo, 9, c)
    dxp = np.zeros((b, h + 2, w + 2, c), dtype=dcols.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i : i + 2 * ho - 1 : 2, j : j + 2 * wo - 1 : 2] += d[:, :, :, 3 * i + j]
    return dxp[:, 1 : h + 1, 1 : w + 1]


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Pre-activation output and the im2col patches needed for backward."""
    cols = im2col(x)
    z = cols @ w.reshape(-1, w.shape[-1]) + b
    return z, cols


def conv_backward(dz: np.ndarray, cols: np.ndarray, w: np.ndarray, x_shape, need_dx: bool = True):
    cout = w.shape[-1]
    k = cols.shape[-1]
    dw = (cols.reshape(-1, k).T @ dz.reshape(-1, cout)).reshape(w.shape)
    db = dz.reshape(-1, cout).sum(axis=0)
    dx = None
    if need_dx:
        dcols = dz @ w.reshape(-1, cout).T
        dx = col2im(dcols, x_shape[1], x_shape[2])
    return dx, dw, db


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# -- model passes ------------------------------------------------------------


@dataclass
class ForwardCache:
    inputs: list  # per conv layer: (x_shape, cols)
    pre: list  # per conv layer: pre-activation z
    features: np.ndarray  # final conv activations (B, Hf, Wf, C)
    pooled: np.ndarray  # (B, C)
    logits: np.ndarray  # (B,)
    probs: np.ndarray  # (B,)


def _check_batch(params: ModelParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    a = params.arch
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != (a.input_size, a.input_size, a.in_channels):
        raise InputError(f"expected batch of {a.input_size}x{a.input_size}x{a.in_channels} tiles, got {x.shape}")
    return x.astype(params.dtype, copy=False)


def body_forward(params: ModelParams, x: np.ndarray, keep: bool = True):
    """Conv stack; returns final activations plus per-layer caches (empty if not ``keep``)."""
    inputs, pre = [], []
    a = x
    for i in range(len(params.arch.conv_channels)):
        z, cols = conv_forward(a, params.params[f"conv{i}.w"], params.params[f"conv{i}.b"])
        if keep:
            inputs.append((a.shape, cols))
            pre.append(z)
        a = relu(z)
    return a, inputs, pre


def head_logits(params: ModelParams, features: np.ndarray) -> np.ndarray:
    pooled = features.mean(axis=(1, 2))
    return (pooled @ params.params["head.w"] + params.params["head.b"])[:, 0]


def forward(params: ModelParams, batch: np.ndarray, keep_cache: bool = True):
    """Probabilities in (0, 1) for a batch of (B, S, S, 3) tiles, plus the cache."""
    x = _check_batch(params, batch)
    feats, inputs, pre = body_forward(params, x, keep_cache)
    pooled = feats.mean(axis=(1, 2))
    logits = (pooled @ params.params["head.w"] + params.params["head.b"])[:, 0]
    probs = sigmoid(logits)
    cache = ForwardCache(inputs, pre, feats, pooled, logits, probs) if keep_cache else None
    return probs, cache


def predict_proba(params: ModelParams, tiles: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Inference in fixed-size chunks (chunking never depends on thread count)."""
    tiles = np.asarray(tiles)
    if len(tiles) == 0:
        return np.zeros(0, dtype=np.float64)
    out = [forward(params, tiles[i : i + chunk], keep_cache=False)[0] for i in range(0, len(tiles), chunk)]
    return np.concatenate(out).astype(np.float64)


def bce_loss(probs: np.ndarray, labels: np.ndarray, clip: float = TRAIN_CLIP) -> float:
    p = np.clip(probs.astype(np.float64), clip, 1.0 - clip)
    y = labels.astype(np.float64)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


def _check_labels(labels, n: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n,):
        raise InputError(f"expected {n} labels, got shape {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise InputError("labels must be 0 or 1")
    return y


def _first_trainable_conv(params: ModelParams) -> int | None:
    for i in range(len(params.arch.conv_channels)):
        if params.trainable[f"conv{i}"]:
            return i
    return None


def body_backward(params: ModelParams, cache_inputs, cache_pre, dfeat: np.ndarray) -> dict[str, np.ndarray]:
    """Backprop from d(final activations) through the trainable part of the body."""
    grads: dict[str, np.ndarray] = {}
    first = _first_trainable_conv(params)
    if first is None:
        return grads
    da = dfeat
    for i in range(len(params.arch.conv_channels) - 1, first - 1, -1):
        dz = da * (cache_pre[i] > 0)
        x_shape, cols = cache_inputs[i]
        w = params.params[f"conv{i}.w"]
        da, dw, db = conv_backward(dz, cols, w, x_shape, need_dx=i > first)
        if params.trainable[f"conv{i}"]:
            grads[f"conv{i}.w"] = dw
            grads[f"conv{i}.b"] = db
    return grads


def head_backward_features(params: ModelParams, features_shape, dlogits: np.ndarray) -> np.ndarray:
    """d(loss)/d(final activations) given d(loss)/d(logits)."""
    b, hf, wf, c = features_shape
    dpooled = dlogits[:, None] * params.params["head.w"][:, 0][None, :]
    return np.broadcast_to(dpooled[:, None, None, :] / (hf * wf), features_shape).astype(params.dtype)


def loss_and_backward(params: ModelParams, cache: ForwardCache, labels) -> tuple[float, dict[str, np.ndarray]]:
    """Mean clipped BCE and gradients for trainable layers only."""
    if cache is None or (not cache.inputs and _first_trainable_conv(params) is not None):
        raise StateError("forward cache missing; call forward(..., keep_cache=True)")
    y = _check_labels(labels, len(cache.probs))
    loss = bce_loss(cache.probs, y)
    n = len(y)
    p = cache.probs
    inside = (p > TRAIN_CLIP) & (p < 1.0 - TRAIN_CLIP)
    dlogits = np.where(inside, (p - y) / n, 0.0).astype(params.dtype)
    grads: dict[str, np.ndarray] = {}
    if params.trainable["head"]:
        grads["head.w"] = cache.pooled.T @ dlogits[:, None]
        grads["head.b"] = np.array([dlogits.sum()], dtype=params.dtype)
    if _first_trainable_conv(params) is not None:
        dfeat = head_backward_features(params, cache.features.shape, dlogits)
        grads.update(body_backward(params, cache.inputs, cache.pre, dfeat))
    return loss, grads


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], lr: float) -> ModelParams:
    """One bias-corrected Adam update (in place) of every trainable layer."""
    for k, g in grads.items():
        if k not in params.params:
            raise InputError(f"gradient for unknown parameter {k!r}")
        if g.shape != params.params[k].shape:
            raise InputError(f"gradient shape {g.shape} != parameter shape {params.params[k].shape} for {k}")
    for layer in params.arch.layer_names:
        if not params.trainable[layer]:
            continue
        keys = [k for k in (f"{layer}.w", f"{layer}.b") if k in grads]
        if not keys:
            continue
        params.steps[layer] += 1
        t = params.steps[layer]
        c1 = 1.0 - BETA1**t
        c2 = 1.0 - BETA2**t
        for k in keys:
            g = grads[k].astype(params.dtype, copy=False)
            m = params.m[k]
            v = params.v[k]
            m *= BETA1
            m += (1.0 - BETA1) * g
            v *= BETA2
            v += (1.0 - BETA2) * (g * g)
            update = (lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)).astype(params.dtype)
            params.params[k] -= update
    return params


def lr_at(epoch: int, base_lr: float = BASE_LR, decay: float = LR_DECAY, every: int = LR_EVERY) -> float:
    return base_lr * decay ** (epoch // every)


def set_freeze(params: ModelParams, phase: str) -> ModelParams:
    """``first_epoch``: only the head trains. ``after``: everything trains."""
    if phase == "first_epoch":
        for layer in params.arch.layer_names:
            params.trainable[layer] = layer == "head"
    elif phase == "after":
        for layer in params.arch.layer_names:
            params.trainable[layer] = True
    else:
        raise InputError(f"unknown freeze phase {phase!r}")
    return params


def train_step(params: ModelParams, tiles: np.ndarray, labels, lr: float) -> float:
    probs, cache = forward(params, tiles)
    loss, grads = loss_and_backward(params, cache, labels)
    adam_step(params, grads, lr)
    return loss


# -- Grad-CAM ----------------------------------------------------------------


def grad_cam_raw(params: ModelParams, tiles: np.ndarray) -> np.ndarray:
    """Unnormalised ReLU(sum_c w_c A_c) maps, (B, Hf, Wf)."""
    x = _check_batch(params, tiles)
    feats, _, _ = body_forward(params, x, keep=False)
    dfeat = head_backward_features(params, feats.shape, np.ones(len(x), dtype=params.dtype))
    weights = dfeat.mean(axis=(1, 2))  # (B, C)
    cam = np.einsum("bhwc,bc->bhw", feats, weights)
    return np.maximum(cam, 0.0)


def channel_weights(params: ModelParams, features: np.ndarray) -> np.ndarray:
    """Grad-CAM channel weights: spatial mean of d(logit)/d(final activations)."""
    dfeat = head_backward_features(params, features.shape, np.ones(len(features), dtype=params.dtype))
    return dfeat.mean(axis=(1, 2))


# -- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"WSIMILC1"


def save_checkpoint(params: ModelParams, path, extra: dict | None = None) -> None:
    """Layout (little-endian):

    ``WSIMILC1`` | uint32 header length | UTF-8 JSON header | float32 blobs

    The header holds the architecture, the ordered parameter names and shapes,
    trainable flags, per-layer Adam step counts and ``extra``. Blobs follow in
    order: every parameter, then every first moment, then every second moment.
    """
    names = list(params.params)
    header = {
        "arch": params.arch.to_json(),
        "params": [[k, list(params.params[k].shape)] for k in names],
        "trainable": params.trainable,
        "steps": params.steps,
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", len(hb)))
    buf.write(hb)
    for store in (params.params, params.m, params.v):
        for k in names:
            buf.write(np.ascontiguousarray(store[k], dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path, arch: ArchSpec | None = None) -> tuple[ModelParams, dict]:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise LoadError(f"{path}: not a wsimil checkpoint")
    (n,) = struct.unpack("<I", data[8:12])
    try:
        header = json.loads(data[12 : 12 + n].decode("utf-8"))
        stored = ArchSpec(**{**header["arch"], "conv_channels": tuple(header["arch"]["conv_channels"])})
    except (ValueError, KeyError, TypeError) as exc:
        raise LoadError(f"{path}: corrupt header ({exc})") from exc
    if arch is not None and arch != stored:
        raise LoadError(f"{path}: checkpoint architecture {stored} does not match {arch}")
    expected = _param_shapes(stored)
    names = [k for k, _ in header["params"]]
    if names != list(expected) or any(tuple(s) != expected[k] for k, s in header["params"]):
        raise LoadError(f"{path}: parameter layout does not match architecture")
    offset = 12 + n
    stores = []
    for _ in range(3):
        d = {}
        for k in names:
            count = int(np.prod(expected[k]))
            end = offset + 4 * count
            if end > len(data):
                raise LoadError(f"{path}: truncated parameter data")
            d[k] = np.frombuffer(data[offset:end], dtype="<f4").reshape(expected[k]).astype(np.float32)
            offset = end
        stores.append(d)
    if offset != len(data):
        raise LoadError(f"{path}: {len(data) - offset} trailing bytes")
    p = ModelParams(stored, stores[0], dict(header["trainable"]), stores[1], stores[2], dict(header["steps"]))
    return p, header.get("extra", {})


# -- pretext pre-training ----------------------------------------------------


@dataclass
class PretextModel:
    """Body trained on texture classification with a temporary softmax head."""

    body: ModelParams
    head_w: np.ndarray
    head_b: np.ndarray
    history: list = field(default_factory=list)

    def logits(self, x: np.ndarray, chunk: int = 64) -> np.ndarray:
        out = []
        for i in range(0, len(x), chunk):
            feats, _, _ = body_forward(self.body, _check_batch(self.body, x[i : i + chunk]), keep=False)
            out.append(feats.mean(axis=(1, 2)) @ self.head_w + self.head_b)
        return np.concatenate(out)

    def accuracy(self, x: np.ndarray, labels: np.ndarray) -> float:
        return float(np.mean(self.logits(x).argmax(axis=1) == labels))

    def to_binary(self, rng: np.random.Generator) -> ModelParams:
        """Body weights with a fresh Glorot sigmoid head and clean optimiser state."""
        p = self.body.copy()
        for k in p.params:
            p.m[k] = np.zeros_like(p.params[k])
            p.v[k] = np.zeros_like(p.params[k])
        for layer in p.steps:
            p.steps[layer] = 0
        set_freeze(p, "after")
        return init_head(p, rng)


def _softmax_xent(logits: np.ndarray, labels: np.ndarray):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    n = len(labels)
    loss = float(-np.mean(np.log(np.clip(p[np.arange(n), labels], 1e-12, None))))
    d = p.copy()
    d[np.arange(n), labels] -= 1.0
    return loss, d / n


def train_pretext(
    arch: ArchSpec,
    corpus: tuple[np.ndarray, np.ndarray],
    rng: np.random.Generator,
    epochs: int = PRETEXT_EPOCHS,
    batch: int = PRETEXT_BATCH,
    lr: float = PRETEXT_LR,
    decay: float = PRETEXT_DECAY,
) -> PretextModel:
    """4-way texture classification; the learning rate decays by ``decay`` each epoch."""
    x, labels = corpus
    labels = np.asarray(labels)
    n_classes = len(np.unique(labels))
    if n_classes < 4:
        raise InputError(f"pretext corpus needs >= 4 texture classes, got {n_classes}")
    body = init_model(arch, rng)
    c = arch.conv_channels[-1]
    head_w = glorot_uniform((c, n_classes), rng)
    head_b = np.zeros(n_classes, dtype=np.float32)
    hm, hv = np.zeros_like(head_w), np.zeros_like(head_w)
    bm, bv = np.zeros_like(head_b), np.zeros_like(head_b)
    model = PretextModel(body, head_w, head_b)
    t = 0
    for epoch in range(epochs):
        order = rng.permutation(len(x))
        losses = []
        for i in range(0, len(order), batch):
            idx = order[i : i + batch]
            xb = _check_batch(body, x[idx])
            feats, inputs, pre = body_forward(body, xb)
            pooled = feats.mean(axis=(1, 2))
            logits = pooled @ model.head_w + model.head_b
            loss, dlog = _softmax_xent(logits.astype(np.float64), labels[idx])
            dlog = dlog.astype(np.float32)
            losses.append(loss)
            gw = pooled.T @ dlog
            gb = dlog.sum(axis=0)
            dpooled = dlog @ model.head_w.T
            hf = feats.shape[1] * feats.shape[2]
            dfeat = np.broadcast_to(dpooled[:, None, None, :] / hf, feats.shape).astype(np.float32)
            grads = body_backward(body, inputs, pre, dfeat)
            step_lr = lr * decay**epoch
            adam_step(body, grads, step_lr)
            t += 1
            for p_, g_, m_, v_ in ((model.head_w, gw, hm, hv), (model.head_b, gb, bm, bv)):
                m_ *= BETA1
                m_ += (1 - BETA1) * g_
                v_ *= BETA2
                v_ += (1 - BETA2) * g_ * g_
                p_ -= (step_lr * (m_ / (1 - BETA1**t)) / (np.sqrt(v_ / (1 - BETA2**t)) + ADAM_EPS)).astype(np.float32)
        model.history.append(float(np.mean(losses)))
    return model


def pretext_pretrain(
    arch: ArchSpec,
    corpus: tuple[np.ndarray, np.ndarray],
    rng: np.random.Generator,
    **kwargs,
) -> ModelParams:
    """Warm-start parameters for the binary classifier from a texture pretext task."""
    return train_pretext(arch, corpus, rng, **kwargs).to_binary(rng)


def arch_from_json(doc: dict) -> ArchSpec:
    return ArchSpec(int(doc["input_size"]), tuple(doc["conv_channels"]), int(doc.get("in_channels", 3)))

