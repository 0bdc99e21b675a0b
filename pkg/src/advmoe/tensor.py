"""Minimal dense-tensor reverse-mode autodiff on numpy arrays.

Supports exactly the ops the trainers and attacks need: conv2d, linear,
relu, batch-statistic normalization, global average pooling, softmax /
log-softmax, cross-entropy, KL-from-reference, elementwise add/mul,
channel slicing/scattering, detach, reshape and full reductions.

Training runs in float32; gradient checks switch the whole graph to
float64. backward() can restrict propagation to a subset of leaves
(``wrt``), which prunes the expensive weight-gradient GEMMs out of
attack inner loops.
"""

import numpy as np


class ContractError(ValueError):
    """An operation was called outside its documented contract."""


class ShapeError(ContractError):
    """Operand shapes do not line up."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float32)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


def tensor(data, requires_grad=False, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _result(data, parents, vjp) -> Tensor:
    if any(p.requires_grad or p._parents for p in parents):
        return Tensor(data, _parents=parents, _vjp=vjp)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    # Reduce a broadcast gradient back to the operand's shape.
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b) -> Tensor:
    a, b = a, _as_tensor(b, a)
    out = a.data + b.data

    def vjp(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return _result(out, (a, b), vjp)


def sub(a: Tensor, b) -> Tensor:
    a, b = a, _as_tensor(b, a)
    out = a.data - b.data

    def vjp(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return _result(out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    def vjp(g, needs):
        return (-g,)

    return _result(-a.data, (a,), vjp)


def mul(a: Tensor, b) -> Tensor:
    a, b = a, _as_tensor(b, a)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def vjp(g, needs):
        return (_unbroadcast(g * bd, a.shape) if needs[0] else None,
                _unbroadcast(g * ad, b.shape) if needs[1] else None)

    return _result(out, (a, b), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape

    def vjp(g, needs):
        return (g.reshape(old),)

    return _result(a.data.reshape(shape), (a,), vjp)


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = np.where(mask, a.data, 0)

    def vjp(g, needs):
        return (g * mask,)

    return _result(out, (a,), vjp)


def slice_channels(a: Tensor, idx) -> Tensor:
    """Take channels ``idx`` along axis 1; backward scatters into place."""
    idx = np.asarray(idx, dtype=np.intp)
    out = a.data[:, idx]
    shape = a.shape

    def vjp(g, needs):
        da = np.zeros(shape, dtype=g.dtype)
        da[:, idx] = g
        return (da,)

    return _result(out, (a,), vjp)


def scatter_channels(a: Tensor, idx, width: int) -> Tensor:
    """Embed channels into a zero tensor of channel ``width`` at ``idx``."""
    idx = np.asarray(idx, dtype=np.intp)
    shape = (a.shape[0], width) + a.shape[2:]
    out = np.zeros(shape, dtype=a.data.dtype)
    out[:, idx] = a.data

    def vjp(g, needs):
        return (g[:, idx],)

    return _result(out, (a,), vjp)


def sum_(a: Tensor) -> Tensor:
    shape = a.shape

    def vjp(g, needs):
        return (np.broadcast_to(g, shape).astype(g.dtype, copy=False),)

    return _result(np.asarray(a.data.sum()), (a,), vjp)


def mean_(a: Tensor) -> Tensor:
    shape = a.shape
    n = a.data.size

    def vjp(g, needs):
        return (np.broadcast_to(g / n, shape).astype(g.dtype, copy=False),)

    return _result(np.asarray(a.data.mean()), (a,), vjp)


def ste_topk(scores: Tensor, k: int) -> Tensor:
    """Binary mask of the k largest scores; straight-through backward.

    Forward emits 1.0 at the top-k positions (ties resolved toward the
    lower index), 0.0 elsewhere; backward passes the gradient through
    unchanged so the scores stay trainable.
    """
    if scores.data.ndim != 1:
        raise ShapeError("ste_topk expects a 1-d score vector")
    if not 1 <= k <= scores.data.size:
        raise ContractError(f"k={k} outside [1, {scores.data.size}]")
    order = np.argsort(-scores.data, kind="stable")
    mask = np.zeros_like(scores.data)
    mask[order[:k]] = 1.0

    def vjp(g, needs):
        return (g,)

    return _result(mask, (scores,), vjp)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g, needs):
        return (g @ bd.T if needs[0] else None,
                ad.T @ g if needs[1] else None)

    return _result(ad @ bd, (a, b), vjp)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w.T + b with w of shape (out_features, in_features)."""
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"linear: input width {x.shape} vs weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def vjp(g, needs):
        gx = g @ wd if needs[0] else None
        gw = g.T @ xd if needs[1] else None
        gb = g.sum(axis=0) if (b is not None and needs[2]) else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, vjp)


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d convolution, NCHW input, (out, in, kh, kw) weight, no bias.

    Internally works channels-last so the im2col gather and the GEMM both
    move contiguous runs; the NCHW interface is unchanged.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and weight")
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"conv2d: {x.shape} incompatible with weight {w.shape}")
    b, cin, h, wd_ = x.data.shape
    cout, _, kh, kw = w.data.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd_ + 2 * padding - kw) // stride + 1

    xp = x.data
    if padding > 0:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    xp = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))  # (B, Hp, Wp, Cin)
    s = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, ho, wo, kh, kw, cin),
        strides=(s[0], s[1] * stride, s[2] * stride, s[1], s[2], s[3]),
        writeable=False,
    )
    cols = np.ascontiguousarray(view).reshape(b * ho * wo, kh * kw * cin)
    wm = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0)).reshape(kh * kw * cin, cout)
    out = np.ascontiguousarray((cols @ wm).reshape(b, ho, wo, cout).transpose(0, 3, 1, 2))
    hp, wp = h + 2 * padding, wd_ + 2 * padding

    def vjp(g, needs):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b * ho * wo, cout)
        gx = gw = None
        if needs[1]:
            gw = np.ascontiguousarray(
                (cols.T @ gm).reshape(kh, kw, cin, cout).transpose(3, 2, 0, 1))
        if needs[0]:
            d6 = (gm @ wm.T).reshape(b, ho, wo, kh, kw, cin)
            dxp = np.zeros((b, hp, wp, cin), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += d6[:, :, :, i, j, :]
            if padding > 0:
                dxp = dxp[:, padding:-padding, padding:-padding, :]
            gx = np.ascontiguousarray(dxp.transpose(0, 3, 1, 2))
        return (gx, gw)

    return _result(out, (x, w), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C) spatial mean."""
    b, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3))

    def vjp(g, needs):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (b, c, h, w)).astype(g.dtype, copy=False),)

    return _result(out, (x,), vjp)


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization by the current batch statistics.

    Statistics are recomputed from the batch on every call (training and
    evaluation alike); there is no running-average state.
    """
    xd = x.data
    b, c, h, w = xd.shape
    m = b * h * w
    mu = xd.mean(axis=(0, 2, 3), keepdims=True)
    var = xd.var(axis=(0, 2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv_std
    gam = gamma.data.reshape(1, c, 1, 1)
    out = gam * xhat + beta.data.reshape(1, c, 1, 1)

    def vjp(g, needs):
        gx = ggamma = gbeta = None
        if needs[1]:
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
        if needs[2]:
            gbeta = g.sum(axis=(0, 2, 3))
        if needs[0]:
            dxhat = g * gam
            t1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            t2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = (inv_std / m) * (m * dxhat - t1 - xhat * t2)
        return (gx, ggamma, gbeta)

    return _result(out, (x, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# classification heads and losses


def _log_softmax_nd(z: np.ndarray) -> np.ndarray:
    zs = z - z.max(axis=-1, keepdims=True)
    return zs - np.log(np.exp(zs).sum(axis=-1, keepdims=True))


def softmax(a: Tensor) -> Tensor:
    p = np.exp(_log_softmax_nd(a.data))

    def vjp(g, needs):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _result(p, (a,), vjp)


def log_softmax(a: Tensor) -> Tensor:
    ls = _log_softmax_nd(a.data)
    p = np.exp(ls)

    def vjp(g, needs):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _result(ls, (a,), vjp)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of logits (B, K) against integer labels (B,)."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.ndim != 1 or labels.shape[0] != logits.data.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    b = labels.shape[0]
    ls = _log_softmax_nd(logits.data)
    loss = -ls[np.arange(b), labels].mean()
    p = np.exp(ls)

    def vjp(g, needs):
        d = p.copy()
        d[np.arange(b), labels] -= 1.0
        return (g * d / b,)

    return _result(np.asarray(loss, dtype=logits.data.dtype), (logits,), vjp)


def kl_from_ref(ref_probs: np.ndarray, logits: Tensor) -> Tensor:
    """Mean KL(ref ‖ softmax(logits)); ref is a constant probability table."""
    ref = np.asarray(ref_probs)
    if ref.shape != logits.data.shape:
        raise ShapeError(f"kl_from_ref: ref {ref.shape} vs logits {logits.shape}")
    b = ref.shape[0]
    ls = _log_softmax_nd(logits.data)
    log_ref = np.where(ref > 0, np.log(np.where(ref > 0, ref, 1.0)), 0.0)
    kl = (ref * (log_ref - ls)).sum(axis=-1).mean()
    p = np.exp(ls)

    def vjp(g, needs):
        return (g * (p - ref) / b,)

    return _result(np.asarray(kl, dtype=logits.data.dtype), (logits,), vjp)


# ---------------------------------------------------------------------------
# reverse pass


def _toposort(root: Tensor):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order  # parents before root


def _useful_set(order, targets):
    # Nodes through which gradient must flow to reach a target leaf.
    useful = {id(t) for t in targets}
    for node in order:  # parents precede children, so one forward scan works
        if node._parents and any(id(p) in useful for p in node._parents):
            useful.add(id(node))
    return useful


def backward(loss: Tensor, params=None, wrt=None):
    """Reverse-mode gradients of a scalar loss.

    Returns a dict mapping each requires_grad leaf reached by the sweep to
    its gradient array. If ``params`` is given, every listed tensor gets an
    entry (zeros when it did not participate). ``wrt`` restricts
    propagation to paths that reach the given tensors, skipping all other
    gradient work.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")

    order = _toposort(loss)
    if wrt is not None:
        useful = _useful_set(order, wrt)
    else:
        useful = None

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
    result: dict[Tensor, np.ndarray] = {}

    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad and not node._parents:
            node.grad = g.reshape(node.data.shape) if g.shape != node.data.shape else g
            result[node] = node.grad
        if not node._parents:
            continue
        needs = tuple(
            (p.requires_grad or bool(p._parents))
            and (useful is None or id(p) in useful)
            for p in node._parents
        )
        if not any(needs):
            continue
        pgrads = node._vjp(g, needs)
        for p, pg, need in zip(node._parents, pgrads, needs):
            if not need or pg is None:
                continue
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg

    if params is not None:
        for p in params:
            if p not in result:
                z = np.zeros_like(p.data)
                p.grad = z
                result[p] = z
    return result
