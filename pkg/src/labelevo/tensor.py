"""Dense NCHW tensors with tape-based reverse-mode autodiff and Adam.

Only the ops needed for a small U-Net are provided: same-padded stride-1
convolution, ReLU, sigmoid, 2x2 max-pool, 2x nearest upsample, channel
concatenation, elementwise add/mul, reductions and a fused focal-loss head.
"""
import itertools

import numpy as np

DTYPE = np.float64

_ids = itertools.count(1)


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, msg, where=None):
        super().__init__(msg)
        self.where = where


class Tensor:
    """A value node. ``grad`` is allocated lazily by ``backward``."""

    _no_grad = 0

    def __init__(self, data, requires_grad=False, _parents=(), _op="leaf", name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        if self.data.ndim > 4:
            raise ShapeError(f"rank {self.data.ndim} > 4 not supported")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.id = next(_ids)
        self.op = _op
        self.name = name
        self._parents = _parents if not Tensor._no_grad else ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        label = self.name or f"#{self.id}"
        return f"Tensor({label}, op={self.op}, shape={self.shape})"

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def backward(self):
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, node {self!r} has shape {self.shape}")
        order = _topo_order(self)
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # leaves that were reachable but got no signal still get a zero buffer
        for node in order:
            if node.requires_grad and node.grad is None:
                node.grad = np.zeros_like(node.data)


class no_grad:
    def __enter__(self):
        Tensor._no_grad += 1

    def __exit__(self, *exc):
        Tensor._no_grad -= 1


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node._parents:
            if p.id not in seen:
                stack.append((p, False))
    return order


def _accumulate(t, g):
    if not (t.requires_grad or t._parents):
        return
    t.grad = g.copy() if t.grad is None else t.grad + g


def _make(data, parents, op, backward):
    tracking = not Tensor._no_grad and any(p.requires_grad or p._parents for p in parents)
    out = Tensor(data, _parents=parents if tracking else (), _op=op)
    if tracking:
        out._backward = backward
    return out


class kink_margin:
    """Records how close relu/max inputs came to a non-differentiable point.

    Inside the context, ``value`` is the smallest |pre-activation| seen by
    relu and the smallest gap between the winner and runner-up of every
    max-pool window or max reduction.
    """
    _active = []

    def __enter__(self):
        self.value = float("inf")
        kink_margin._active.append(self)
        return self

    def __exit__(self, *exc):
        kink_margin._active.remove(self)

    @classmethod
    def note(cls, gap):
        for ctx in cls._active:
            ctx.value = min(ctx.value, float(gap))


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def check_finite(t, where=None):
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"non-finite values in {where or repr(t)}", where=where)
    return t


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ (nodes #{a.id}, #{b.id})")

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(a.data + b.data, (a, b), "add", bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ (nodes #{a.id}, #{b.id})")

    def bw(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make(a.data * b.data, (a, b), "mul", bw)


def relu(x):
    keep = x.data > 0
    if kink_margin._active and x.data.size:
        kink_margin.note(np.abs(x.data).min())

    def bw(g):
        _accumulate(x, g * keep)

    return _make(x.data * keep, (x,), "relu", bw)


def sigmoid(x):
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bw(g):
        _accumulate(x, g * s * (1.0 - s))

    return _make(s, (x,), "sigmoid", bw)


# ---------------------------------------------------------------- reductions

def sum_(x):
    def bw(g):
        _accumulate(x, np.broadcast_to(g, x.shape).copy())

    return _make(np.array(x.data.sum()), (x,), "sum", bw)


def mean(x):
    n = x.data.size

    def bw(g):
        _accumulate(x, np.full(x.shape, float(g) / n))

    return _make(np.array(x.data.mean()), (x,), "mean", bw)


def max_(x):
    flat = int(np.argmax(x.data))
    if kink_margin._active and x.data.size > 1:
        top = np.partition(x.data.reshape(-1), -2)[-2:]
        kink_margin.note(top[1] - top[0])

    def bw(g):
        gx = np.zeros(x.data.size)
        gx[flat] = float(g)
        _accumulate(x, gx.reshape(x.shape))

    return _make(np.array(x.data.reshape(-1)[flat]), (x,), "max", bw)


# ---------------------------------------------------------------- spatial ops

def conv2d_output_shape(x_shape, w_shape):
    n, c, h, w = x_shape
    o, ci, kh, kw = w_shape
    return (n, o, h, w)


def _im2col(xp, k, h, w):
    """Columns (C, k, k, N, H, W) of a padded NCHW array."""
    n, c = xp.shape[:2]
    cols = np.empty((c, k, k, n, h, w), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + h, j:j + w].transpose(1, 0, 2, 3)
    return cols


def conv2d(x, weight, bias=None):
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and kernel, got {x.shape} / {weight.shape}")
    o, ci, kh, kw = weight.shape
    if ci != x.shape[1]:
        raise ShapeError(
            f"conv2d: input has {x.shape[1]} channels, kernel #{weight.id} expects {ci}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel #{weight.id} must be square and odd, got {kh}x{kw}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias #{bias.id} shape {bias.shape} != ({o},)")
    n, c, h, w = x.shape
    k, p = kh, kh // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, k, h, w).reshape(c * k * k, n * h * w)
    wm = weight.data.reshape(o, -1)
    y = (wm @ cols).reshape(o, n, h, w).transpose(1, 0, 2, 3)
    if bias is not None:
        y = y + bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gm = g.transpose(1, 0, 2, 3).reshape(o, -1)
        if weight.requires_grad or weight._parents:
            _accumulate(weight, (gm @ cols.T).reshape(weight.shape))
        if bias is not None:
            _accumulate(bias, gm.sum(axis=1))
        if x.requires_grad or x._parents:
            dcols = (wm.T @ gm).reshape(c, k, k, n, h, w)
            dxp = np.zeros((n, c, h + 2 * p, w + 2 * p))
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + h, j:j + w] += dcols[:, i, j].transpose(1, 0, 2, 3)
            _accumulate(x, dxp[:, :, p:p + h, p:p + w] if p else dxp)

    return _make(np.ascontiguousarray(y), parents, "conv2d", bw)


def max_pool2d(x):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2d: spatial size {h}x{w} of node #{x.id} is not even")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    if kink_margin._active and blocks.size:
        top = np.sort(blocks, axis=-1)[..., -2:]
        # ties between exact zeros come from dead relus, whose own margin is recorded
        live = (top[..., 1] != 0) | (top[..., 0] != 0)
        if live.any():
            kink_margin.note((top[..., 1] - top[..., 0])[live].min())

    def bw(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        _accumulate(x, gx)

    return _make(y, (x,), "max_pool2d", bw)


def upsample2d(x):
    y = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape

    def bw(g):
        _accumulate(x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _make(y, (x,), "upsample2d", bw)


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.data.ndim != len(ref) or any(
                a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ShapeError(f"concat: node #{t.id} shape {t.shape} incompatible with {ref}")
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, part in zip(tensors, np.split(g, cuts, axis=axis)):
            _accumulate(t, part)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat", bw)


# ---------------------------------------------------------------- loss head

PROB_EPS = 1e-7


def focal_loss(pred, target, mask=None, gamma=2.0, alpha=0.75):
    """Mean focal loss over masked pixels.

    ``pred`` is a tensor of probabilities; ``target`` is a soft label array
    of the same shape; ``mask`` selects the pixels entering the mean.
    """
    t = np.asarray(target, dtype=DTYPE)
    if t.shape != pred.shape:
        raise ShapeError(f"focal_loss: target shape {t.shape} != prediction {pred.shape}")
    m = np.ones(t.shape) if mask is None else np.asarray(mask, dtype=DTYPE)
    if m.shape != t.shape:
        raise ShapeError(f"focal_loss: mask shape {m.shape} != prediction {pred.shape}")
    count = m.sum()
    if count <= 0:
        raise ValueError("focal_loss: empty mask")
    p = np.clip(pred.data, PROB_EPS, 1.0 - PROB_EPS)
    lp, l1p = np.log(p), np.log1p(-p)
    pos = -alpha * t * (1.0 - p) ** gamma * lp
    neg = -(1.0 - alpha) * (1.0 - t) * p ** gamma * l1p
    value = ((pos + neg) * m).sum() / count

    def bw(g):
        dpos = alpha * t * (gamma * (1.0 - p) ** (gamma - 1) * lp - (1.0 - p) ** gamma / p) \
            if gamma else -alpha * t / p
        dneg = -(1.0 - alpha) * (1.0 - t) * (gamma * p ** (gamma - 1) * l1p - p ** gamma / (1.0 - p)) \
            if gamma else (1.0 - alpha) * (1.0 - t) / (1.0 - p)
        inside = (pred.data >= PROB_EPS) & (pred.data <= 1.0 - PROB_EPS)
        _accumulate(pred, float(g) * (dpos + dneg) * m * inside / count)

    return _make(np.array(value), (pred,), "focal_loss", bw)


def _softplus(z):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def sigmoid_focal_loss(logits, target, mask=None, gamma=2.0, alpha=0.75):
    """Focal loss of ``sigmoid(logits)``, fused for stability.

    The value matches ``focal_loss`` on the clamped probabilities. The
    gradient is the exact derivative with respect to the logits of the
    unclamped loss, so it never vanishes for a saturated pixel.
    """
    t = np.asarray(target, dtype=DTYPE)
    if t.shape != logits.shape:
        raise ShapeError(f"sigmoid_focal_loss: target shape {t.shape} != logits {logits.shape}")
    m = np.ones(t.shape) if mask is None else np.asarray(mask, dtype=DTYPE)
    if m.shape != t.shape:
        raise ShapeError(f"sigmoid_focal_loss: mask shape {m.shape} != logits {logits.shape}")
    count = m.sum()
    if count <= 0:
        raise ValueError("sigmoid_focal_loss: empty mask")
    z = logits.data
    lp, l1p = -_softplus(-z), -_softplus(z)
    p = np.exp(lp)
    q = np.exp(l1p)  # 1 - p without cancellation
    floor = np.log(PROB_EPS)
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    pos = -alpha * t * (1.0 - pc) ** gamma * np.maximum(lp, floor)
    neg = -(1.0 - alpha) * (1.0 - t) * pc ** gamma * np.maximum(l1p, floor)
    value = ((pos + neg) * m).sum() / count

    def bw(g):
        dpos = alpha * t * (gamma * p * q ** gamma * lp - q ** (gamma + 1))
        dneg = -(1.0 - alpha) * (1.0 - t) * (gamma * p ** gamma * q * l1p - p ** (gamma + 1))
        _accumulate(logits, float(g) * (dpos + dneg) * m / count)

    return _make(np.array(value), (logits,), "sigmoid_focal_loss", bw)


# ---------------------------------------------------------------- init / optim

def glorot_uniform(shape, rng):
    o, c, kh, kw = shape
    fan_in, fan_out = c * kh * kw, o * kh * kw
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


class Adam:
    """Bias-corrected Adam over a fixed, ordered parameter list."""

    def __init__(self, params, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads=None):
        if grads is None:
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g.shape != p.shape:
                raise ShapeError(f"adam: gradient for parameter {i} has shape {g.shape}, expected {p.shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"adam: non-finite gradient for parameter {i} ({p.name})", where=i)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------- checking

def finite_diff_check(loss_fn, params, eps=1e-5, max_entries=None, rng=None):
    """Max relative error between backprop and central differences.

    ``loss_fn`` rebuilds the graph from the current parameter values and
    returns a scalar tensor. With ``max_entries`` only a random subset of
    each parameter's entries is perturbed.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                up = loss_fn().item()
            flat[i] = orig - eps
            with no_grad():
                down = loss_fn().item()
            flat[i] = orig
            num = (up - down) / (2 * eps)
            a = ga.reshape(-1)[i]
            if not (np.isfinite(num) and np.isfinite(a)):
                return float("inf")
            err = abs(a - num) / max(abs(a), abs(num), 1e-12)
            worst = max(worst, err)
    return worst
