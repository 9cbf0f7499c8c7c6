"""Desk-scale trainable fully convolutional extractor and its training loops.

The extractor is a stack of 3x3 same-padded ReLU convolutions and 2x2
stride-2 max pools, so any input of spatial size (w, h) with
w, h >= 2**n_pools yields a (floor(w/2**p), floor(h/2**p)) feature map.
Training alternates between solving the sparse reconstruction codes W
(coefficients held by the sparse module) and one SGD step on the
verification loss

    L = alpha * ||X - Y W||_F^2 + beta * ||W||_1,   alpha in {+1, -1}

with W treated as a constant during the parameter update.  For
alpha = -1 the residual term is hinged at a margin so repulsion cannot
diverge.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, NumericError
from .feature_maps import BlockSet, FeatureMap, divide_into_blocks
from .sparse import CodeMatrix, DEFAULT_BETA, solve_batch

CKPT_MAGIC = b"FCNP"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: int = 3


@dataclass(frozen=True)
class PoolSpec:
    size: int = 2


@dataclass(frozen=True)
class FcnConfig:
    """Layer stack description: at least one conv and one pool."""

    in_channels: int
    layers: tuple[ConvSpec | PoolSpec, ...]

    def __post_init__(self):
        if self.in_channels < 1:
            raise ValueError("in_channels must be positive")
        if not any(isinstance(l, ConvSpec) for l in self.layers):
            raise ValueError("config needs at least one conv layer")
        if not any(isinstance(l, PoolSpec) for l in self.layers):
            raise ValueError("config needs at least one pool layer")

    @property
    def n_pools(self) -> int:
        return sum(1 for l in self.layers if isinstance(l, PoolSpec))

    @property
    def out_channels(self) -> int:
        convs = [l for l in self.layers if isinstance(l, ConvSpec)]
        return convs[-1].out_channels

    @property
    def min_input(self) -> int:
        return 2 ** self.n_pools

    def output_dims(self, width: int, height: int) -> tuple[int, int]:
        p = self.n_pools
        return (width // (2 ** p), height // (2 ** p))


def default_config(in_channels: int = 1) -> FcnConfig:
    """Desk-scale default: conv(8)-pool-conv(16)-pool-conv(16)."""
    return FcnConfig(
        in_channels=in_channels,
        layers=(ConvSpec(8), PoolSpec(), ConvSpec(16), PoolSpec(), ConvSpec(16)),
    )


def deep_config(in_channels: int = 3) -> FcnConfig:
    """Five conv / five pool stack; 64x64 inputs come out as 2x2 maps."""
    return FcnConfig(
        in_channels=in_channels,
        layers=(
            ConvSpec(16), PoolSpec(),
            ConvSpec(32), PoolSpec(),
            ConvSpec(32), PoolSpec(),
            ConvSpec(48), PoolSpec(),
            ConvSpec(48), PoolSpec(),
        ),
    )


@dataclass
class FcnParams:
    config: FcnConfig
    weights: list[np.ndarray]  # one (k, k, cin, cout) tensor per conv layer
    biases: list[np.ndarray]

    def copy(self) -> "FcnParams":
        return FcnParams(
            config=self.config,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )


def init_params(config: FcnConfig, seed: int = 0) -> FcnParams:
    """He fan-in initialization with zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    cin = config.in_channels
    for layer in config.layers:
        if isinstance(layer, ConvSpec):
            k = layer.kernel
            std = np.sqrt(2.0 / (k * k * cin))
            weights.append(rng.normal(0.0, std, size=(k, k, cin, layer.out_channels)))
            biases.append(np.zeros(layer.out_channels))
            cin = layer.out_channels
    return FcnParams(config=config, weights=weights, biases=biases)


# ---------------------------------------------------------------------------
# layer primitives (float64, desk scale)

def _conv_forward(x, w, b):
    k = w.shape[0]
    pad = k // 2
    h, wd, cin = x.shape
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    cols = np.empty((h, wd, k * k * cin), dtype=np.float64)
    i = 0
    for di in range(k):
        for dj in range(k):
            cols[:, :, i * cin : (i + 1) * cin] = xp[di : di + h, dj : dj + wd, :]
            i += 1
    pre = cols.reshape(h * wd, -1) @ w.reshape(-1, w.shape[-1]) + b
    pre = pre.reshape(h, wd, -1)
    out = np.maximum(pre, 0.0)
    return out, (cols, pre, x.shape, w.shape)


def _conv_backward(dout, cache, w):
    cols, pre, x_shape, w_shape = cache
    h, wd, cin = x_shape
    k = w_shape[0]
    cout = w_shape[-1]
    dpre = (dout * (pre > 0.0)).reshape(h * wd, cout)
    dw = (cols.reshape(h * wd, -1).T @ dpre).reshape(w_shape)
    db = dpre.sum(axis=0)
    dcols = (dpre @ w.reshape(-1, cout).T).reshape(h, wd, k * k, cin)
    pad = k // 2
    dxp = np.zeros((h + 2 * pad, wd + 2 * pad, cin))
    i = 0
    for di in range(k):
        for dj in range(k):
            dxp[di : di + h, dj : dj + wd, :] += dcols[:, :, i, :]
            i += 1
    dx = dxp[pad : pad + h, pad : pad + wd, :]
    return dx, dw, db


def _pool_forward(x, size=2):
    h, wd, c = x.shape
    ho, wo = h // size, wd // size
    xt = (
        x[: ho * size, : wo * size]
        .reshape(ho, size, wo, size, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(ho, wo, size * size, c)
    )
    idx = xt.argmax(axis=2)
    out = np.take_along_axis(xt, idx[:, :, None, :], axis=2)[:, :, 0, :]
    return out, (idx, x.shape, size)


def _pool_backward(dout, cache):
    idx, x_shape, size = cache
    h, wd, c = x_shape
    ho, wo, _ = dout.shape
    dxt = np.zeros((ho, wo, size * size, c))
    np.put_along_axis(dxt, idx[:, :, None, :], dout[:, :, None, :], axis=2)
    dx = np.zeros((h, wd, c))
    dx[: ho * size, : wo * size] = (
        dxt.reshape(ho, wo, size, size, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(ho * size, wo * size, c)
    )
    return dx


def _forward_with_cache(image: np.ndarray, params: FcnParams):
    x = np.asarray(image, dtype=np.float64)
    caches = []
    conv_i = 0
    for layer in params.config.layers:
        if isinstance(layer, ConvSpec):
            x, cache = _conv_forward(x, params.weights[conv_i], params.biases[conv_i])
            caches.append(("conv", cache))
            conv_i += 1
        else:
            x, cache = _pool_forward(x, layer.size)
            caches.append(("pool", cache))
    return x, caches


def _backward(dout: np.ndarray, caches, params: FcnParams):
    dws = [np.zeros_like(w) for w in params.weights]
    dbs = [np.zeros_like(b) for b in params.biases]
    conv_i = len(params.weights) - 1
    dx = dout
    for kind, cache in reversed(caches):
        if kind == "conv":
            dx, dw, db = _conv_backward(dx, cache, params.weights[conv_i])
            dws[conv_i] = dw
            dbs[conv_i] = db
            conv_i -= 1
        else:
            dx = _pool_backward(dx, cache)
    return dx, dws, dbs


def fcn_forward(image: FeatureMap | np.ndarray, params: FcnParams, source_id: str = "") -> FeatureMap:
    """Run the conv/pool stack on an arbitrary-size input.

    Output spatial dims follow floor(w / 2**p) x floor(h / 2**p).
    """
    arr = image.data if isinstance(image, FeatureMap) else np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    if c != params.config.in_channels:
        raise ValueError(
            f"input has {c} channels, extractor expects {params.config.in_channels}"
        )
    mn = params.config.min_input
    if h < mn or w < mn:
        raise ValueError(
            f"input {w}x{h} too small for {params.config.n_pools} pooling layers"
        )
    out, _ = _forward_with_cache(arr, params)
    if not np.all(np.isfinite(out)):
        raise NumericError("extractor produced non-finite activations")
    if isinstance(image, FeatureMap) and not source_id:
        source_id = image.source_id
    return FeatureMap(
        width=out.shape[1], height=out.shape[0], channels=out.shape[2],
        data=out, source_id=source_id,
    )


def map_to_block_matrix(fm: FeatureMap) -> np.ndarray:
    """Row-major scale-1 fibers as a (channels, w*h) matrix."""
    return fm.data.reshape(fm.height * fm.width, fm.channels).T.astype(np.float64)


def scatter_block_gradients(d_blocks: np.ndarray, width: int, height: int) -> np.ndarray:
    """Adjoint of map_to_block_matrix: (c, w*h) gradients back to (h, w, c)."""
    c = d_blocks.shape[0]
    return d_blocks.T.reshape(height, width, c)


# ---------------------------------------------------------------------------
# verification loss and alternating optimization

def _as_matrix(obj) -> np.ndarray:
    if isinstance(obj, BlockSet):
        return obj.matrix()
    if isinstance(obj, CodeMatrix):
        return obj.matrix()
    return np.asarray(obj, dtype=np.float64)


def verification_loss(X, Y, W, alpha: int, beta: float, margin: float | None = None) -> float:
    """alpha * ||X - YW||_F^2 + beta * ||W||_1, optionally margin-hinged.

    With ``margin`` set and alpha = -1, the repulsion term saturates once
    the squared residual exceeds the margin.
    """
    X, Y, W = _as_matrix(X), _as_matrix(Y), _as_matrix(W)
    if alpha not in (1, -1):
        raise ValueError("alpha must be +1 or -1")
    if Y.shape[1] != W.shape[0] or X.shape[1] != W.shape[1] or X.shape[0] != Y.shape[0]:
        raise ValueError("inconsistent shapes for X, Y, W")
    r = X - Y @ W
    rsq = float((r * r).sum())
    penalty = beta * float(np.abs(W).sum())
    if alpha == -1 and margin is not None:
        return -min(rsq, float(margin)) + penalty
    return alpha * rsq + penalty


def loss_gradients(X, Y, W, alpha: int, margin: float | None = None):
    """Gradients of the residual term w.r.t. X and Y, W held constant.

    dX = 2 alpha (X - YW); dY = -2 alpha (X - YW) W^T.  Under an active
    margin hinge (alpha = -1, residual beyond the margin) both are zero.
    """
    X, Y, W = _as_matrix(X), _as_matrix(Y), _as_matrix(W)
    if alpha not in (1, -1):
        raise ValueError("alpha must be +1 or -1")
    r = X - Y @ W
    if alpha == -1 and margin is not None and float((r * r).sum()) >= float(margin):
        return np.zeros_like(X), np.zeros_like(Y)
    dX = 2.0 * alpha * r
    dY = -2.0 * alpha * r @ W.T
    return dX, dY


@dataclass(frozen=True)
class VerificationPair:
    """A training pair: probe input, gallery input, and the identity label."""

    probe: np.ndarray
    gallery: np.ndarray
    alpha: int

    def __post_init__(self):
        if self.alpha not in (1, -1):
            raise ValueError("alpha must be +1 or -1")


@dataclass(frozen=True)
class TrainState:
    params: FcnParams
    learning_rate: float
    step: int = 0
    loss_history: tuple[float, ...] = ()
    solver_warnings: int = 0


def alternating_train_step(
    pair: VerificationPair,
    state: TrainState,
    beta: float = DEFAULT_BETA,
    margin: float | None = None,
) -> TrainState:
    """One alternate-and-descend step on a verification pair.

    First solves the reconstruction codes W with the current extractor
    frozen, then takes one SGD step on the verification loss with W
    frozen.  Solver non-convergence is counted, not raised.
    """
    params = state.params
    x_out, x_caches = _forward_with_cache(_prep_image(pair.probe, params), params)
    y_out, y_caches = _forward_with_cache(_prep_image(pair.gallery, params), params)
    if not (np.all(np.isfinite(x_out)) and np.all(np.isfinite(y_out))):
        raise NumericError("extractor produced non-finite activations")

    x_fm = FeatureMap(width=x_out.shape[1], height=x_out.shape[0], channels=x_out.shape[2], data=x_out)
    y_fm = FeatureMap(width=y_out.shape[1], height=y_out.shape[0], channels=y_out.shape[2], data=y_out)
    X_bs = divide_into_blocks(x_fm)
    Y_bs = divide_into_blocks(y_fm)
    codes = solve_batch(Y_bs, X_bs, beta=beta)
    warn = 0 if all(c.converged for c in codes.columns) else 1

    X = map_to_block_matrix(x_fm)
    Y = map_to_block_matrix(y_fm)
    W = codes.matrix()
    if margin is None:
        margin = 2.0 * X.shape[0]
    loss = verification_loss(X, Y, W, pair.alpha, beta, margin=margin)
    dX, dY = loss_gradients(X, Y, W, pair.alpha, margin=margin)

    _, dws_x, dbs_x = _backward(scatter_block_gradients(dX, x_fm.width, x_fm.height), x_caches, params)
    _, dws_y, dbs_y = _backward(scatter_block_gradients(dY, y_fm.width, y_fm.height), y_caches, params)

    lr = state.learning_rate
    new_params = FcnParams(
        config=params.config,
        weights=[w - lr * (gx + gy) for w, gx, gy in zip(params.weights, dws_x, dws_y)],
        biases=[b - lr * (gx + gy) for b, gx, gy in zip(params.biases, dbs_x, dbs_y)],
    )
    return TrainState(
        params=new_params,
        learning_rate=lr,
        step=state.step + 1,
        loss_history=state.loss_history + (loss,),
        solver_warnings=state.solver_warnings + warn,
    )


def _prep_image(image, params: FcnParams) -> np.ndarray:
    arr = image.data if isinstance(image, FeatureMap) else np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    mn = params.config.min_input
    if arr.shape[0] < mn or arr.shape[1] < mn:
        raise ValueError("training input too small for the pool stack")
    return arr


# ---------------------------------------------------------------------------
# identification pre-training (softmax head on a fixed input size)

@dataclass
class PretrainResult:
    params: FcnParams
    loss_history: list[float]
    train_accuracy: float


def _softmax_ce(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    z = logits - logits.max()
    e = np.exp(z)
    p = e / e.sum()
    loss = -float(np.log(max(p[label], 1e-300)))
    grad = p.copy()
    grad[label] -= 1.0
    return loss, grad


def pretrain_identification(
    images: Sequence[np.ndarray],
    labels: Sequence,
    config: FcnConfig,
    epochs: int = 10,
    lr: float = 0.05,
    seed: int = 0,
    batch_size: int = 0,
) -> PretrainResult:
    """Train conv stack + flatten + linear softmax head; return the conv stack.

    All images must share one size.  The classifier head starts at zero
    (uniform predictions, cross-entropy ln K) and is discarded.
    """
    if len(images) != len(labels):
        raise ValueError("images and labels must align")
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise ValueError("identification pre-training needs at least 2 classes")
    cls_index = {c: i for i, c in enumerate(classes)}
    y = np.array([cls_index[l] for l in labels])
    k = len(classes)

    params = init_params(config, seed=seed)
    imgs = [_prep_image(im, params) for im in images]
    shape0 = imgs[0].shape
    if any(im.shape != shape0 for im in imgs):
        raise ValueError("pre-training images must share one fixed size")
    out0, _ = _forward_with_cache(imgs[0], params)
    feat_dim = out0.size
    head_w = np.zeros((feat_dim, k))
    head_b = np.zeros(k)

    rng = np.random.default_rng(seed)
    n = len(imgs)
    history: list[float] = []
    for _ in range(max(epochs, 0)):
        order = rng.permutation(n) if batch_size else np.arange(n)
        bs = batch_size if batch_size else n
        epoch_loss = 0.0
        for start in range(0, n, bs):
            batch = order[start : start + bs]
            dws = [np.zeros_like(w) for w in params.weights]
            dbs = [np.zeros_like(b) for b in params.biases]
            dhw = np.zeros_like(head_w)
            dhb = np.zeros_like(head_b)
            for i in batch:
                out, caches = _forward_with_cache(imgs[i], params)
                flat = out.ravel()
                loss, dlogits = _softmax_ce(flat @ head_w + head_b, y[i])
                epoch_loss += loss
                dhw += np.outer(flat, dlogits)
                dhb += dlogits
                dflat = head_w @ dlogits
                _, dws_i, dbs_i = _backward(dflat.reshape(out.shape), caches, params)
                for j in range(len(dws)):
                    dws[j] += dws_i[j]
                    dbs[j] += dbs_i[j]
            m = len(batch)
            params = FcnParams(
                config=params.config,
                weights=[w - lr * g / m for w, g in zip(params.weights, dws)],
                biases=[b - lr * g / m for b, g in zip(params.biases, dbs)],
            )
            head_w -= lr * dhw / m
            head_b -= lr * dhb / m
        history.append(epoch_loss / n)

    correct = 0
    for i in range(n):
        out, _ = _forward_with_cache(imgs[i], params)
        logits = out.ravel() @ head_w + head_b
        if int(np.argmax(logits)) == y[i]:
            correct += 1
    return PretrainResult(params=params, loss_history=history, train_accuracy=correct / n)


# ---------------------------------------------------------------------------
# checkpoint serialization: "FCNP" + version, shape-prefixed float32 tensors

def _pack_tensor(arr: np.ndarray) -> bytes:
    a = np.ascontiguousarray(arr, dtype="<f4")
    out = struct.pack("<B", a.ndim)
    for dim in a.shape:
        out += struct.pack("<I", dim)
    return out + a.tobytes()


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.raw):
            raise FormatError(f"{self.path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, self.raw, self.pos)
        self.pos += size
        return vals

    def tensor(self) -> np.ndarray:
        (ndim,) = self.take("<B")
        shape = tuple(self.take("<" + "I" * ndim)) if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if self.pos + nbytes > len(self.raw):
            raise FormatError(f"{self.path}: truncated tensor data")
        arr = np.frombuffer(self.raw, dtype="<f4", count=count, offset=self.pos)
        self.pos += nbytes
        return arr.reshape(shape).astype(np.float64)


def write_checkpoint(path: str | Path, params: FcnParams) -> None:
    cfg = params.config
    out = struct.pack("<4sHHI", CKPT_MAGIC, CKPT_VERSION, len(cfg.layers), cfg.in_channels)
    conv_i = 0
    for layer in cfg.layers:
        if isinstance(layer, ConvSpec):
            out += struct.pack("<B", 1)
            out += _pack_tensor(params.weights[conv_i])
            out += _pack_tensor(params.biases[conv_i])
            conv_i += 1
        else:
            out += struct.pack("<BB", 2, layer.size)
    Path(path).write_bytes(out)


def read_checkpoint(path: str | Path) -> FcnParams:
    rd = _Reader(Path(path).read_bytes(), path)
    magic, version, n_layers, in_channels = rd.take("<4sHHI")
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    layers: list[ConvSpec | PoolSpec] = []
    weights, biases = [], []
    for _ in range(n_layers):
        (tag,) = rd.take("<B")
        if tag == 1:
            w = rd.tensor()
            b = rd.tensor()
            if w.ndim != 4 or b.ndim != 1 or b.shape[0] != w.shape[3]:
                raise FormatError(f"{path}: malformed conv tensors")
            layers.append(ConvSpec(out_channels=w.shape[3], kernel=w.shape[0]))
            weights.append(w)
            biases.append(b)
        elif tag == 2:
            (size,) = rd.take("<B")
            layers.append(PoolSpec(size=size))
        else:
            raise FormatError(f"{path}: unknown layer tag {tag}")
    if rd.pos != len(rd.raw):
        raise FormatError(f"{path}: trailing bytes after checkpoint payload")
    try:
        cfg = FcnConfig(in_channels=in_channels, layers=tuple(layers))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return FcnParams(config=cfg, weights=weights, biases=biases)
