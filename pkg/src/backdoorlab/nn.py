"""Minimal dense-tensor numerical core with hand-derived backpropagation.

Everything runs on float64 numpy arrays. Models are small sequential
stacks (conv / relu / maxpool / flatten / dense) described by a
ModelSpec; parameters live in a ParamSet keyed by layer name. The
backward pass always produces gradients w.r.t. the input images as well
as the parameters, because the sample-scoring stage needs them.
"""

import struct
from dataclasses import dataclass

import numpy as np

# Softmax outputs are clamped to this floor and renormalized so that
# log/KL terms stay finite no matter how saturated the network gets.
PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    """Raised when layer shapes or inputs do not compose."""


# ---------------------------------------------------------------------------
# layer and model specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int


@dataclass(frozen=True)
class Conv2d:
    in_ch: int
    out_ch: int
    k: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool2:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


def _shape_after(shape, layer):
    """Output shape of `layer` given input `shape` ((C,H,W) or (D,))."""
    if isinstance(layer, Conv2d):
        if len(shape) != 3:
            raise ShapeError(f"conv2d needs a (C,H,W) input, got {shape}")
        c, h, w = shape
        if c != layer.in_ch:
            raise ShapeError(f"conv2d expects {layer.in_ch} channels, got {c}")
        if h < layer.k or w < layer.k:
            raise ShapeError(f"conv2d kernel {layer.k} too large for {h}x{w}")
        return (layer.out_ch, h - layer.k + 1, w - layer.k + 1)
    if isinstance(layer, MaxPool2):
        if len(shape) != 3:
            raise ShapeError(f"maxpool2 needs a (C,H,W) input, got {shape}")
        c, h, w = shape
        if h < 2 or w < 2:
            raise ShapeError(f"maxpool2 needs at least 2x2 input, got {h}x{w}")
        # ceil mode: odd edges keep a shrunken window instead of being dropped
        return (c, (h + 1) // 2, (w + 1) // 2)
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, Dense):
        if len(shape) != 1:
            raise ShapeError(f"dense needs a flat input, got {shape}")
        if shape[0] != layer.in_dim:
            raise ShapeError(f"dense expects width {layer.in_dim}, got {shape[0]}")
        return (layer.out_dim,)
    if isinstance(layer, ReLU):
        return shape
    raise ShapeError(f"unknown layer {layer!r}")


@dataclass(frozen=True)
class ModelSpec:
    """Sequential architecture: input shape, layer stack, class count."""

    input_shape: tuple
    layers: tuple
    num_classes: int

    def __post_init__(self):
        shape = tuple(self.input_shape)
        for layer in self.layers:
            shape = _shape_after(shape, layer)
        if shape != (self.num_classes,):
            raise ShapeError(
                f"model output shape {shape} != ({self.num_classes},)"
            )


def conv_net(input_shape, num_classes, channels=(16, 32)):
    """Default small CNN: conv3-relu-pool per channel step, then dense."""
    c, h, w = input_shape
    layers = []
    in_ch = c
    for out_ch in channels:
        layers += [Conv2d(in_ch, out_ch, 3), ReLU(), MaxPool2()]
        h, w = (h - 1) // 2, (w - 1) // 2
        in_ch = out_ch
    layers.append(Flatten())
    layers.append(Dense(in_ch * h * w, num_classes))
    return ModelSpec(tuple(input_shape), tuple(layers), num_classes)


def mlp_net(input_shape, num_classes, hidden=(64,)):
    """Flat MLP option for inputs too small for the conv stack."""
    d = int(np.prod(input_shape))
    layers = [Flatten()]
    for width in hidden:
        layers += [Dense(d, width), ReLU()]
        d = width
    layers.append(Dense(d, num_classes))
    return ModelSpec(tuple(input_shape), tuple(layers), num_classes)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

class ParamSet:
    """Named parameter tensors plus same-shaped gradient accumulators."""

    def __init__(self, tensors):
        self.tensors = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}
        self.grads = {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def copy(self):
        return ParamSet({k: v.copy() for k, v in self.tensors.items()})

    def zero_grads(self):
        for g in self.grads.values():
            g[...] = 0.0

    def names(self):
        return sorted(self.tensors)

    def finite(self):
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())


def init_params(spec, rng):
    """Uniform(-s, s) weights with s = sqrt(6/(fan_in+fan_out)); zero biases."""
    tensors = {}
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            s = np.sqrt(6.0 / (layer.in_dim + layer.out_dim))
            tensors[f"layer{i}.w"] = rng.uniform(-s, s, size=(layer.in_dim, layer.out_dim))
            tensors[f"layer{i}.b"] = np.zeros(layer.out_dim)
        elif isinstance(layer, Conv2d):
            fan_in = layer.in_ch * layer.k * layer.k
            fan_out = layer.out_ch * layer.k * layer.k
            s = np.sqrt(6.0 / (fan_in + fan_out))
            tensors[f"layer{i}.w"] = rng.uniform(
                -s, s, size=(layer.out_ch, layer.in_ch, layer.k, layer.k)
            )
            tensors[f"layer{i}.b"] = np.zeros(layer.out_ch)
    return ParamSet(tensors)


# ---------------------------------------------------------------------------
# forward / backward engine
# ---------------------------------------------------------------------------

def _im2col(x, k):
    # (N,C,H,W) -> (N,Ho,Wo,C*k*k), gathered so a single matmul does the conv
    n, c, h, w = x.shape
    ho, wo = h - k + 1, w - k + 1
    cols = np.empty((n, ho, wo, c, k, k), dtype=np.float64)
    for di in range(k):
        for dj in range(k):
            cols[:, :, :, :, di, dj] = x[:, :, di:di + ho, dj:dj + wo].transpose(0, 2, 3, 1)
    return cols.reshape(n, ho, wo, c * k * k)


def _conv_forward(x, w, b):
    n, _, h, width = x.shape
    out_ch, in_ch, k, _ = w.shape
    ho, wo = h - k + 1, width - k + 1
    cols = _im2col(x, k)
    wmat = w.transpose(1, 2, 3, 0).reshape(in_ch * k * k, out_ch)
    out = cols.reshape(-1, in_ch * k * k) @ wmat + b
    return out.reshape(n, ho, wo, out_ch).transpose(0, 3, 1, 2), cols


def _conv_backward(dout, cols, w, x_shape):
    n, _, h, width = x_shape
    out_ch, in_ch, k, _ = w.shape
    ho, wo = h - k + 1, width - k + 1
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, out_ch)
    cols2 = cols.reshape(-1, in_ch * k * k)
    dw = (cols2.T @ dmat).reshape(in_ch, k, k, out_ch).transpose(3, 0, 1, 2)
    db = dmat.sum(axis=0)
    dcols = (dmat @ w.transpose(1, 2, 3, 0).reshape(in_ch * k * k, out_ch).T)
    dcols = dcols.reshape(n, ho, wo, in_ch, k, k)
    dx = np.zeros(x_shape, dtype=np.float64)
    for di in range(k):
        for dj in range(k):
            dx[:, :, di:di + ho, dj:dj + wo] += dcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    return dx, dw, db


def _pool_forward(x):
    n, c, h, w = x.shape
    ho, wo = (h + 1) // 2, (w + 1) // 2
    xp = x
    if h % 2 or w % 2:
        xp = np.full((n, c, ho * 2, wo * 2), -np.inf)
        xp[:, :, :h, :w] = x
    win = xp.reshape(n, c, ho, 2, wo, 2)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = win.argmax(axis=-1)  # first max wins ties, deterministically
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def _pool_backward(dout, cache):
    idx, x_shape = cache
    n, c, h, w = x_shape
    ho, wo = (h + 1) // 2, (w + 1) // 2
    dwin = np.zeros((n, c, ho, wo, 4), dtype=np.float64)
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    dxp = dwin.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * 2, wo * 2)
    return dxp[:, :, :h, :w]


def _forward_cached(spec, params, x):
    """Batched forward over (N,...) input; returns logits and layer caches."""
    h = x
    caches = []
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv2d):
            w = params.tensors[f"layer{i}.w"]
            b = params.tensors[f"layer{i}.b"]
            h, cols = _conv_forward(h, w, b)
            caches.append(("conv", i, cols, h.shape))
        elif isinstance(layer, ReLU):
            caches.append(("relu", i, h, None))
            h = np.maximum(h, 0.0)
        elif isinstance(layer, MaxPool2):
            h, pc = _pool_forward(h)
            caches.append(("pool", i, pc, None))
        elif isinstance(layer, Flatten):
            caches.append(("flatten", i, h.shape, None))
            h = h.reshape(h.shape[0], -1)
        elif isinstance(layer, Dense):
            w = params.tensors[f"layer{i}.w"]
            b = params.tensors[f"layer{i}.b"]
            caches.append(("dense", i, h, None))
            h = h @ w + b
    return h, caches


def _backward(spec, params, caches, dlogits, x_shape):
    """Given d(loss)/d(logits), fill per-parameter grads and return dx."""
    grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    d = dlogits
    for kind, i, cache, extra in reversed(caches):
        if kind == "dense":
            w = params.tensors[f"layer{i}.w"]
            grads[f"layer{i}.w"] += cache.T @ d
            grads[f"layer{i}.b"] += d.sum(axis=0)
            d = d @ w.T
        elif kind == "flatten":
            d = d.reshape(cache)
        elif kind == "pool":
            d = _pool_backward(d, cache)
        elif kind == "relu":
            d = d * (cache > 0.0)
        elif kind == "conv":
            w = params.tensors[f"layer{i}.w"]
            dconv, dw, db = _conv_backward(d, cache, w, _conv_input_shape(cache, w, extra))
            grads[f"layer{i}.w"] += dw
            grads[f"layer{i}.b"] += db
            d = dconv
    return d, grads


def _conv_input_shape(cols, w, out_shape):
    n = cols.shape[0]
    _, in_ch, k, _ = w.shape
    ho, wo = out_shape[2], out_shape[3]
    return (n, in_ch, ho + k - 1, wo + k - 1)


def _probs_from_logits(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    p = np.maximum(s, PROB_FLOOR)
    q = p / p.sum(axis=1, keepdims=True)
    return q, s


def _check_input(spec, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape == tuple(spec.input_shape):
        return x[None]
    if x.ndim == len(spec.input_shape) + 1 and x.shape[1:] == tuple(spec.input_shape):
        return x
    raise ShapeError(f"input shape {x.shape} does not match model {spec.input_shape}")


def forward(spec, params, x):
    """Class-probability vector for one input (softmax with floor)."""
    xb = _check_input(spec, x)
    if xb.shape[0] != 1:
        raise ShapeError("forward() takes a single input; use forward_batch")
    logits, _ = _forward_cached(spec, params, xb)
    q, _ = _probs_from_logits(logits)
    return q[0]


def forward_batch(spec, params, images, chunk=512):
    """(N,K) probability rows, computed in chunks to bound memory."""
    images = _check_input(spec, images)
    out = np.empty((images.shape[0], spec.num_classes), dtype=np.float64)
    for lo in range(0, images.shape[0], chunk):
        logits, _ = _forward_cached(spec, params, images[lo:lo + chunk])
        out[lo:lo + chunk], _ = _probs_from_logits(logits)
    return out


def predict_batch(spec, params, images, chunk=512):
    return forward_batch(spec, params, images, chunk=chunk).argmax(axis=1)


def _normalize_batch(spec, batch):
    if isinstance(batch, tuple) and len(batch) == 2:
        images, labels = batch
    else:
        pairs = list(batch)
        if not pairs:
            raise ValueError("batch must be non-empty")
        images = np.stack([np.asarray(x, dtype=np.float64) for x, _ in pairs])
        labels = np.array([y for _, y in pairs], dtype=np.int64)
    images = _check_input(spec, images)
    labels = np.asarray(labels, dtype=np.int64)
    if images.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    if labels.shape != (images.shape[0],):
        raise ShapeError("labels must be one class index per image")
    return images, labels


def loss_and_grads(spec, params, batch):
    """Mean cross-entropy over the batch, with full gradients.

    Parameter gradients (of the mean loss) are written into
    ``params.grads``. The returned array holds per-sample input
    gradients d l_n / d x_n of the *unaveraged* per-sample losses,
    which is what single-sample perturbation crafting needs.
    """
    images, labels = _normalize_batch(spec, batch)
    n = images.shape[0]
    logits, caches = _forward_cached(spec, params, images)
    q, s = _probs_from_logits(logits)

    rows = np.arange(n)
    loss = float(-np.log(q[rows, labels]).mean())

    # Backward through floor+renormalize, then the softmax Jacobian.
    p = np.maximum(s, PROB_FLOOR)
    big_s = p.sum(axis=1, keepdims=True)
    dl_dp = np.ones_like(p) / big_s
    dl_dp[rows, labels] -= 1.0 / (q[rows, labels] * big_s[:, 0])
    u = dl_dp * (s > PROB_FLOOR)
    dlogits = s * (u - (u * s).sum(axis=1, keepdims=True))

    input_grads, grads = _backward(spec, params, caches, dlogits, images.shape)
    for k in params.grads:
        params.grads[k][...] = grads[k] / n
    return loss, input_grads


def per_sample_losses(spec, params, images, labels, chunk=512):
    """Cross-entropy of each sample, no gradients."""
    images = _check_input(spec, images)
    labels = np.asarray(labels, dtype=np.int64)
    out = np.empty(images.shape[0], dtype=np.float64)
    for lo in range(0, images.shape[0], chunk):
        q = forward_batch(spec, params, images[lo:lo + chunk], chunk=chunk)
        rows = np.arange(q.shape[0])
        out[lo:lo + chunk] = -np.log(q[rows, labels[lo:lo + chunk]])
    return out


def sgd_step(params, grads, lr, direction="descend"):
    """theta <- theta -/+ lr * grad, in place."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    if direction not in ("descend", "ascend"):
        raise ValueError(f"unknown direction {direction!r}")
    sign = -1.0 if direction == "descend" else 1.0
    for k, v in params.tensors.items():
        v += sign * lr * grads[k]
    return params


def kl_divergence(p, q):
    """sum p*ln(p/q), with the 0*ln(0/.) = 0 convention."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    mask = p > 0.0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def kl_rows(p, q):
    """Row-wise KL for (N,K) probability matrices."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    terms = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0) / q), 0.0)
    return terms.sum(axis=1)


def grad_check(spec, params, batch, h=1e-6):
    """Max relative error between analytic and central-difference grads.

    Checks every parameter entry of the mean batch loss; h must sit in
    (0, 1e-3]. A model without parameters trivially returns 0.
    """
    if not (0.0 < h <= 1e-3):
        raise ValueError("h must be in (0, 1e-3]")
    loss_and_grads(spec, params, batch)
    analytic = {k: v.copy() for k, v in params.grads.items()}
    if not analytic:
        return 0.0

    def batch_loss():
        images, labels = _normalize_batch(spec, batch)
        q = forward_batch(spec, params, images)
        rows = np.arange(images.shape[0])
        return float(-np.log(q[rows, labels]).mean())

    worst = 0.0
    for k in params.names():
        t = params.tensors[k]
        flat = t.reshape(-1)
        ana = analytic[k].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            lp = batch_loss()
            flat[j] = orig - h
            lm = batch_loss()
            flat[j] = orig
            cd = (lp - lm) / (2.0 * h)
            denom = max(abs(ana[j]), abs(cd), 1e-12)
            worst = max(worst, abs(ana[j] - cd) / denom)
    return worst


# ---------------------------------------------------------------------------
# checkpoint file format
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"MECA"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, tensors):
    """Binary little-endian tensor archive; names written in sorted order."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path):
    def need(f, n):
        b = f.read(n)
        if len(b) != n:
            raise ValueError(f"truncated checkpoint file: {path}")
        return b

    tensors = {}
    with open(path, "rb") as f:
        if need(f, 4) != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        version, count = struct.unpack("<II", need(f, 8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}: {path}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", need(f, 2))
            name = need(f, name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", need(f, 1))
            dims = struct.unpack(f"<{rank}I", need(f, 4 * rank))
            size = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(need(f, 8 * size), dtype="<f8")
            tensors[name] = data.reshape(dims).astype(np.float64)
    return tensors


def save_params(path, params):
    save_checkpoint(path, params.tensors)


def load_params(path):
    return ParamSet(load_checkpoint(path))
