"""Tiny U-Net, loss masking modes, augmentation and the per-epoch trainer."""
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T

MAGIC = b"LEVN"
CKPT_VERSION = 1


@dataclass
class NetworkSpec:
    depth: int = 2
    base_channels: int = 8
    in_channels: int = 1
    out_channels: int = 1
    kernel: int = 3
    prior: float = 0.01  # initial foreground probability set through the head bias


@dataclass
class LossConfig:
    gamma: float = 2.0
    alpha: float = 0.75
    background: str = "all"  # all | random | handcrafted
    count: int = 0
    seed: int = 0


class Network:
    """Encoder-decoder with skip connections and a sigmoid head.

    Each encoder level is two conv+ReLU blocks followed by a 2x2 max-pool;
    each decoder level upsamples, concatenates the skip and applies two
    conv+ReLU blocks. A 1x1 conv maps to the single output channel.
    """

    def __init__(self, spec, seed=0):
        if spec.depth < 1 or spec.base_channels < 1:
            raise ValueError("depth and base_channels must be >= 1")
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.params = []
        self._layers = {}
        k, c = spec.kernel, spec.base_channels
        chans = [c * 2 ** i for i in range(spec.depth + 1)]
        prev = spec.in_channels
        for lvl in range(spec.depth):
            self._conv(f"enc{lvl}a", prev, chans[lvl], k, rng)
            self._conv(f"enc{lvl}b", chans[lvl], chans[lvl], k, rng)
            prev = chans[lvl]
        self._conv("mid_a", prev, chans[-1], k, rng)
        self._conv("mid_b", chans[-1], chans[-1], k, rng)
        prev = chans[-1]
        for lvl in reversed(range(spec.depth)):
            self._conv(f"dec{lvl}a", prev + chans[lvl], chans[lvl], k, rng)
            self._conv(f"dec{lvl}b", chans[lvl], chans[lvl], k, rng)
            prev = chans[lvl]
        self._conv("head", prev, spec.out_channels, 1, rng)
        if spec.prior:
            self._layers["head"][1].data[...] = np.log(spec.prior / (1.0 - spec.prior))

    def _conv(self, name, cin, cout, k, rng):
        w = T.Tensor(T.glorot_uniform((cout, cin, k, k), rng), requires_grad=True, name=f"{name}.w")
        b = T.Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.b")
        self._layers[name] = (w, b)
        self.params += [w, b]

    @property
    def num_parameters(self):
        return sum(p.size for p in self.params)

    def check_input(self, h, w):
        m = 2 ** self.spec.depth
        if h % m or w % m:
            ph, pw = (-h) % m, (-w) % m
            raise ValueError(
                f"input {h}x{w} not divisible by {m}; pad by ({ph}, {pw}) rows/cols")

    def _block(self, x, name):
        w, b = self._layers[name]
        return T.relu(T.conv2d(x, w, b))

    def forward(self, x, logits=False):
        if not isinstance(x, T.Tensor):
            x = T.Tensor(x)
        if x.data.ndim != 4:
            raise T.ShapeError(f"network input must be NCHW, got {x.shape}")
        T.check_finite(x, "network input")
        self.check_input(*x.shape[2:])
        skips = []
        for lvl in range(self.spec.depth):
            x = self._block(self._block(x, f"enc{lvl}a"), f"enc{lvl}b")
            skips.append(x)
            x = T.max_pool2d(x)
        x = self._block(self._block(x, "mid_a"), "mid_b")
        for lvl in reversed(range(self.spec.depth)):
            x = T.concat([T.upsample2d(x), skips[lvl]])
            x = self._block(self._block(x, f"dec{lvl}a"), f"dec{lvl}b")
        w, b = self._layers["head"]
        z = T.conv2d(x, w, b)
        return z if logits else T.sigmoid(z)

    def predict(self, images):
        """Probability maps for a stack of HxW images, shape (N, H, W)."""
        images = np.asarray(images, dtype=T.DTYPE)
        with T.no_grad():
            out = self.forward(images[:, None])
        return out.data[:, 0]

    def zero_(self):
        for p in self.params:
            p.data[...] = 0.0

    def state(self):
        return [p.data.copy() for p in self.params]

    def load_state(self, arrays):
        for p, a in zip(self.params, arrays):
            if p.shape != a.shape:
                raise ValueError(f"{p.name}: shape {a.shape} != {p.shape}")
            p.data[...] = a


def build_network(spec, seed=0):
    return Network(spec, seed)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(net, path):
    """Flat binary: magic, u32 version, u32 spec-json length, spec json,
    u32 tensor count, then per tensor u32 ndim, u32 dims and LE float64 data."""
    spec = json.dumps(asdict(net.spec), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(spec)))
        fh.write(spec)
        fh.write(struct.pack("<I", len(net.params)))
        for p in net.params:
            fh.write(struct.pack("<I", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}I", *p.shape))
            fh.write(p.data.astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a network checkpoint")
    version, n = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    spec = NetworkSpec(**json.loads(buf[off:off + n]))
    off += n
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    arrays = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        size = int(np.prod(shape))
        arrays.append(np.frombuffer(buf, "<f8", size, off).reshape(shape).astype(np.float64))
        off += 8 * size
    net = Network(spec)
    net.load_state(arrays)
    return net


# ---------------------------------------------------------------- loss masking

def _ring_pixels(positive, radius):
    """Background pixels within Chebyshev distance ``radius`` of a positive."""
    h, w = positive.shape
    near = np.zeros_like(positive)
    rows, cols = np.nonzero(positive)
    for r, c in zip(rows, cols):
        near[max(r - radius, 0):r + radius + 1, max(c - radius, 0):c + radius + 1] = True
    return near & ~positive


class BackgroundSampler:
    """Builds the pixel mask entering the focal-loss mean.

    ``all`` uses every pixel. ``random`` adds ``count`` background pixels
    redrawn at every call. ``handcrafted`` adds ``count`` background pixels
    drawn once near the targets and reused for the rest of the run.
    """

    def __init__(self, mode="all", count=0, seed=0, near_radius=4):
        if mode not in ("all", "random", "handcrafted"):
            raise ValueError(f"unknown background mode {mode!r}")
        self.mode, self.count = mode, int(count)
        self.rng = np.random.default_rng(seed)
        self.near_radius = near_radius
        self._fixed = {}

    def __call__(self, target, key=0):
        return background_loss_mask(target, self.mode, self.count, self.rng,
                                    cache=self._fixed, key=key, near_radius=self.near_radius)


def background_loss_mask(target, mode, count, rng, cache=None, key=0, near_radius=4):
    target = np.asarray(target)
    positive = target > 0.5
    if mode == "all":
        return np.ones(target.shape, dtype=bool)
    if not positive.any():
        raise ValueError("background_loss_mask: target has no positive pixel")
    if mode == "handcrafted" and cache is not None and key in cache:
        return cache[key] | positive
    if mode == "random":
        pool = np.flatnonzero(~positive)
    elif mode == "handcrafted":
        pool = np.flatnonzero(_ring_pixels(positive, near_radius))
        if pool.size < count:
            pool = np.flatnonzero(~positive)
    else:
        raise ValueError(f"unknown background mode {mode!r}")
    if count > pool.size:
        raise ValueError(f"background_loss_mask: {count} background points requested, "
                         f"only {pool.size} available")
    mask = positive.copy()
    mask.reshape(-1)[rng.choice(pool, count, replace=False)] = True
    if mode == "handcrafted" and cache is not None:
        cache[key] = mask & ~positive
    return mask


# ---------------------------------------------------------------- training

def standardize(images):
    """Zero-mean, unit-variance copy of each HxW image in a stack."""
    images = np.asarray(images, dtype=T.DTYPE)
    mu = images.mean(axis=(-2, -1), keepdims=True)
    sd = images.std(axis=(-2, -1), keepdims=True)
    # a flat image only loses its offset
    return (images - mu) / np.where(sd > 0, sd, 1.0)


def augment(image, label, code):
    """One of the 8 flip/rotation symmetries, applied to both arrays."""
    k, flip = code % 4, code // 4
    if flip:
        image, label = image[:, ::-1], label[:, ::-1]
    return np.rot90(image, k).copy(), np.rot90(label, k).copy()


def step_lr(base_lr, epoch, total_epochs, milestones=(0.6, 0.9), factor=0.1):
    """Learning rate for 1-based ``epoch`` under a fractional step schedule."""
    lr = base_lr
    for m in milestones:
        if epoch > int(round(m * total_epochs)):
            lr *= factor
    return lr


@dataclass
class TrainState:
    net: Network
    opt: T.Adam
    rng: np.random.Generator
    loss_cfg: LossConfig = field(default_factory=LossConfig)
    sampler: BackgroundSampler = None
    batch_size: int = 8
    augment: bool = True

    def __post_init__(self):
        if self.sampler is None:
            c = self.loss_cfg
            self.sampler = BackgroundSampler(c.background, c.count, c.seed)


class TrainingError(RuntimeError):
    def __init__(self, msg, epoch=None, batch=None):
        super().__init__(msg)
        self.epoch, self.batch = epoch, batch


def batch_loss(net, images, labels, masks, loss_cfg):
    z = net.forward(T.Tensor(images[:, None]), logits=True)
    return T.sigmoid_focal_loss(z, labels[:, None], masks[:, None],
                                gamma=loss_cfg.gamma, alpha=loss_cfg.alpha)


def train_epoch(state, images, labels, epoch=0):
    """One pass over ``images`` supervised by the current ``labels``.

    Returns the mean per-batch loss. When there are fewer images than the
    batch size, the batch is filled with augmented copies.
    """
    n = len(images)
    bs = state.batch_size
    if n >= bs:
        order = state.rng.permutation(n)
        batches = [order[i:i + bs] for i in range(0, n, bs)]
    else:
        batches = [np.resize(state.rng.permutation(n), bs)]
    losses = []
    for bi, idx in enumerate(batches):
        xs, ys, ms = [], [], []
        for j, i in enumerate(idx):
            # a short batch of one scene cycles through all 8 symmetries
            code = int(state.rng.integers(8)) if n >= bs else j % 8
            x, y = (augment(images[i], labels[i], code) if state.augment
                    else (images[i], labels[i]))
            xs.append(x)
            ys.append(y)
            ms.append(state.sampler(y, key=(int(i), code)))
        xs, ys, ms = np.stack(xs), np.stack(ys), np.stack(ms)
        state.opt.zero_grad()
        loss = batch_loss(state.net, xs, ys, ms, state.loss_cfg)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}", epoch, bi)
        loss.backward()
        try:
            state.opt.step()
        except T.NonFiniteError as exc:
            raise TrainingError(f"{exc} at epoch {epoch}, batch {bi}", epoch, bi) from exc
        losses.append(value)
    return float(np.mean(losses))


def evaluation_loss(net, images, labels, loss_cfg):
    with T.no_grad():
        masks = np.ones(np.shape(labels), dtype=bool)
        return batch_loss(net, np.asarray(images), np.asarray(labels), masks, loss_cfg).item()
