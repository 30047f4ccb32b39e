"""Reverse domain adaptation: an image transformer trained against a patch discriminator.

The transformer maps real (here: textured pseudo-real) images towards the
synthetic domain.  The discriminator outputs, per patch, the probability that
its input is a transformed real image; synthetic images are the other class.
"""
from __future__ import annotations

import contextlib
import csv
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import nn
from .validation import check_images

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-7
LOG_FLOOR = math.log(PROB_FLOOR)
LOG_COLUMNS = ["step", "loss_T", "loss_T_adv", "loss_T_selfreg", "loss_D", "disc_patch_acc"]


@contextlib.contextmanager
def frozen(params):
    """Evaluate without recording gradients for ``params``."""
    params = list(params)
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, s in zip(params, saved):
            p.requires_grad = s


def _as_batch(x) -> nn.Tensor:
    if isinstance(x, nn.Tensor):
        return x
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim == 3:
        x = x[..., None]
    return nn.Tensor(x)


class TransformerNet:
    """7x7 conv to ``channels`` maps, residual blocks, 1x1 conv back to one map.

    Initialised close to the identity: the first conv passes the input through
    on channel 0, every residual branch ends in a zero conv, and the output conv
    reads channel 0 only.
    """

    def __init__(self, channels=64, n_blocks=10, seed=0, slope=0.01, sharpness=200.0):
        if channels < 1 or n_blocks < 0:
            raise ValueError("channels must be >= 1 and n_blocks >= 0")
        self.channels, self.n_blocks = channels, n_blocks
        self.slope, self.sharpness = slope, sharpness
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7F]))
        p: Dict[str, nn.Parameter] = {}
        w_in = rng.uniform(-1, 1, size=(7, 7, 1, channels)) * np.sqrt(6.0 / 49) * 0.1
        w_in[:, :, 0, 0] = 0.0
        w_in[3, 3, 0, 0] = 1.0
        p["in.w"] = nn.Parameter(w_in, "in.w")
        p["in.b"] = nn.zeros((channels,), "in.b")
        for i in range(n_blocks):
            p[f"res{i}.w1"] = nn.he_uniform(rng, (3, 3, channels, channels), 9 * channels, f"res{i}.w1")
            p[f"res{i}.b1"] = nn.zeros((channels,), f"res{i}.b1")
            p[f"res{i}.w2"] = nn.zeros((3, 3, channels, channels), f"res{i}.w2")
            p[f"res{i}.b2"] = nn.zeros((channels,), f"res{i}.b2")
        w_out = np.zeros((1, 1, channels, 1))
        w_out[0, 0, 0, 0] = 1.0
        p["out.w"] = nn.Parameter(w_out, "out.w")
        p["out.b"] = nn.zeros((1,), "out.b")
        self.params = p

    def forward(self, x) -> nn.Tensor:
        p = self.params
        z = nn.leaky_relu(nn.conv2d(_as_batch(x), p["in.w"], p["in.b"], pad=3), self.slope)
        for i in range(self.n_blocks):
            block = (p[f"res{i}.w1"], p[f"res{i}.b1"], p[f"res{i}.w2"], p[f"res{i}.b2"])
            z = nn.residual_block(z, block, self.slope)
        return nn.smooth_clamp(nn.conv2d(z, p["out.w"], p["out.b"]), self.sharpness)

    __call__ = forward


class DiscriminatorNet:
    """Five 3x3 convs with two 2x2 max-pools, then per-patch two-class logits.

    Class 1 is "transformed real", class 0 is "synthetic".
    """

    def __init__(self, channels=(8, 8, 16, 16, 16), seed=0, slope=0.2, input_gain=4.0):
        channels = tuple(channels)
        if len(channels) != 5:
            raise ValueError(f"the discriminator has five conv layers, got {len(channels)} widths")
        self.channels, self.slope = channels, slope
        # fixed affine map of [0, 1] intensities to roughly unit scale; dim images otherwise train slowly
        self.input_gain = float(input_gain)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD15]))
        p: Dict[str, nn.Parameter] = {}
        c_in = 1
        for i, c in enumerate(channels):
            p[f"conv{i}.w"] = nn.he_uniform(rng, (3, 3, c_in, c), 9 * c_in, f"conv{i}.w")
            p[f"conv{i}.b"] = nn.zeros((c,), f"conv{i}.b")
            c_in = c
        p["cls.w"] = nn.Parameter(rng.uniform(-1, 1, size=(1, 1, c_in, 2)) * np.sqrt(6.0 / c_in) * 0.1, "cls.w")
        p["cls.b"] = nn.zeros((2,), "cls.b")
        self.params = p

    def logits(self, x, params=None) -> nn.Tensor:
        p = self.params if params is None else params
        z = _as_batch(x)
        z = (z - 0.5) * self.input_gain
        for i in range(5):
            z = nn.leaky_relu(nn.conv2d(z, p[f"conv{i}.w"], p[f"conv{i}.b"], pad=1), self.slope)
            if i in (1, 3):
                z = nn.max_pool_2x2(z)
        return nn.conv2d(z, p["cls.w"], p["cls.b"])

    def constants(self) -> Dict[str, nn.Tensor]:
        """Parameter values as plain tensors: evaluating through them never touches the real gradients."""
        return {k: nn.Tensor(v.data) for k, v in self.params.items()}

    def probs(self, x) -> np.ndarray:
        """Per-patch (synthetic, transformed-real) probabilities, shape (N, h, w, 2)."""
        with frozen(self.params.values()):
            return nn.softmax_2class(self.logits(x)).data


def transform(x, tnet: TransformerNet) -> np.ndarray:
    """Apply the transformer to one image or a stack; same shape out, values in [0, 1]."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 2
    with frozen(tnet.params.values()):
        out = tnet(arr).data[..., 0]
    return out[0] if single else out


def floored(logp: nn.Tensor) -> nn.Tensor:
    """Clamp log-probabilities at ``log(PROB_FLOOR)`` in value only.

    The gradient passes straight through so that a confidently wrong network
    still gets a learning signal instead of a dead zero.
    """

    def backward():
        logp.accumulate(out.grad)

    out = nn.Tensor(np.maximum(logp.data, LOG_FLOOR), (logp,), backward)
    return out


def _class_logprob(logits: nn.Tensor, cls: int) -> nn.Tensor:
    return floored(nn.take(nn.log_softmax_2class(logits), (Ellipsis, cls)))


def patch_accuracy(d_xprime: np.ndarray, d_g: np.ndarray) -> float:
    """Fraction of patches on the correct side of 0.5, pooled over both batches."""
    correct = np.count_nonzero(d_xprime > 0.5) + np.count_nonzero(d_g < 0.5)
    return correct / (d_xprime.size + d_g.size)


def discriminator_loss(x_prime, g, dnet: DiscriminatorNet):
    """Cross-entropy: ``mean(-log D(x')) + mean(-log(1 - D(g)))`` over patches.

    Returns ``(loss, patch_accuracy)``.
    """
    lx = dnet.logits(x_prime)
    lg = dnet.logits(g)
    loss = nn.neg(nn.add(nn.mean(_class_logprob(lx, 1)), nn.mean(_class_logprob(lg, 0))))
    acc = patch_accuracy(np.exp(nn.log_softmax_2class(lx).data[..., 1]),
                         np.exp(nn.log_softmax_2class(lg).data[..., 1]))
    return loss, acc


@dataclass
class TransformerLoss:
    total: nn.Tensor
    adversarial: float
    selfreg: float
    output: nn.Tensor


def transformer_loss(x, tnet: TransformerNet, dnet: DiscriminatorNet, lam: float) -> TransformerLoss:
    """``mean(-log(1 - D(T(x)))) + lam * mean|T(x) - x|`` with the discriminator frozen."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    xb = _as_batch(x)
    out = tnet(xb)
    adv = nn.neg(nn.mean(_class_logprob(dnet.logits(out, dnet.constants()), 0)))
    reg = nn.mean(nn.tabs(nn.add(out, nn.neg(xb))))
    total = nn.add(adv, nn.mul(reg, lam))
    return TransformerLoss(total, float(adv.data), float(reg.data), out)


class HistoryBuffer:
    """Bounded pool of past transformer outputs with uniform replacement."""

    def __init__(self, capacity: int, seed=0):
        if capacity < 1:
            raise ValueError("buffer capacity must be >= 1")
        self.capacity = capacity
        self.items: List[np.ndarray] = []
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB0F]))

    def __len__(self):
        return len(self.items)

    def insert(self, image: np.ndarray) -> None:
        if len(self.items) < self.capacity:
            self.items.append(np.array(image, copy=True))
        else:
            self.items[int(self.rng.integers(self.capacity))] = np.array(image, copy=True)

    def sample(self, n: int) -> List[np.ndarray]:
        idx = self.rng.integers(len(self.items), size=n)
        return [self.items[i] for i in idx]


def buffer_push_sample(buffer: HistoryBuffer, new_batch: np.ndarray, k: int) -> np.ndarray:
    """Half new images, half replayed ones (all new while the buffer holds fewer than k/2)."""
    if k % 2:
        raise ValueError(f"k must be even, got {k}")
    new_batch = np.asarray(new_batch)
    half = k // 2
    if len(buffer) < half:
        mixed = new_batch[:k]
    else:
        mixed = np.concatenate([new_batch[:half], np.stack(buffer.sample(half))])
    for img in new_batch:
        buffer.insert(img)
    return mixed


@dataclass
class DaConfig:
    lam: float = 0.5
    n_t: int = 2
    n_d: int = 1
    steps: int = 2000
    batch_size: int = 8
    pretrain_t: int = 800
    pretrain_d: int = 200
    lr_t: float = 1e-3
    lr_d: float = 2e-3
    momentum: float = 0.9
    buffer_capacity: int = 128
    channels: int = 64
    n_blocks: int = 10
    disc_channels: tuple = (8, 8, 16, 16, 16)
    crop: int = 0
    seed: int = 0

    def validate(self) -> None:
        if not self.lam > 0:
            raise ValueError(f"lambda must be > 0, got {self.lam}")
        for name in ("n_t", "n_d", "steps", "batch_size", "buffer_capacity", "channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.batch_size % 2:
            raise ValueError("batch_size must be even")
        if self.pretrain_t < 0 or self.pretrain_d < 0 or self.n_blocks < 0:
            raise ValueError("pretraining steps and n_blocks must be >= 0")
        if not (self.lr_t > 0 and self.lr_d > 0):
            raise ValueError("learning rates must be > 0")
        if self.crop and (self.crop < 8 or self.crop % 4):
            raise ValueError("crop must be 0 or a multiple of 4 that is >= 8")


@dataclass
class DaResult:
    tnet: TransformerNet
    dnet: DiscriminatorNet
    log: List[dict]


class _Sampler:
    def __init__(self, images: np.ndarray, rng: np.random.Generator, crop: int):
        self.images, self.rng, self.crop = images, rng, crop

    def __call__(self, k: int) -> np.ndarray:
        idx = self.rng.integers(len(self.images), size=k)
        batch = self.images[idx]
        if not self.crop:
            return batch
        h, w = batch.shape[1:]
        c = self.crop
        ys = self.rng.integers(0, h - c + 1, size=k)
        xs = self.rng.integers(0, w - c + 1, size=k)
        return np.stack([b[y:y + c, x:x + c] for b, y, x in zip(batch, ys, xs)])


def train_da(real: np.ndarray, synthetic: np.ndarray, config: Optional[DaConfig] = None, log_every=50) -> DaResult:
    """Adversarial training loop with transformer/discriminator pretraining and a history buffer."""
    config = config or DaConfig()
    config.validate()
    real = np.asarray(real, dtype=np.float64)
    synthetic = np.asarray(synthetic, dtype=np.float64)
    if len(real) == 0 or len(synthetic) == 0:
        raise ValueError("both domains need at least one image")
    if real.shape[1:] != synthetic.shape[1:]:
        raise ValueError(f"image shapes differ: real {real.shape[1:]}, synthetic {synthetic.shape[1:]}")
    root = np.random.SeedSequence([config.seed, 0xDA])
    s_model, s_real, s_syn, s_buf = root.spawn(4)
    model_seed = int(s_model.generate_state(1)[0])
    tnet = TransformerNet(config.channels, config.n_blocks, seed=model_seed)
    dnet = DiscriminatorNet(config.disc_channels, seed=model_seed)
    sample_real = _Sampler(real, np.random.default_rng(s_real), config.crop)
    sample_syn = _Sampler(synthetic, np.random.default_rng(s_syn), config.crop)
    buffer = HistoryBuffer(config.buffer_capacity, seed=int(s_buf.generate_state(1)[0]))
    t_params, d_params = list(tnet.params.values()), list(dnet.params.values())
    t_cfg = nn.SgdConfig(config.lr_t, config.momentum, 0.0, 1.0, 1)
    d_cfg = nn.SgdConfig(config.lr_d, config.momentum, 0.0, 1.0, 1)
    k = config.batch_size

    def t_step(step, selfreg_only=False):
        nn.zero_grad(t_params)
        x = sample_real(k)
        if selfreg_only:
            out = tnet(x)
            reg = nn.mean(nn.tabs(nn.add(out, nn.neg(_as_batch(x)))))
            loss = nn.mul(reg, config.lam)
            res = (float(loss.data), 0.0, float(reg.data))
        else:
            tl = transformer_loss(x, tnet, dnet, config.lam)
            loss = tl.total
            res = (float(loss.data), tl.adversarial, tl.selfreg)
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"transformer loss is non-finite at step {step}")
        loss.backward()
        nn.sgd_step(t_params, t_cfg)
        return res

    def d_step(step):
        nn.zero_grad(d_params)
        x_prime = transform(sample_real(k), tnet)
        mixed = buffer_push_sample(buffer, x_prime, k)
        loss, acc = discriminator_loss(mixed, sample_syn(k), dnet)
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"discriminator loss is non-finite at step {step}")
        loss.backward()
        nn.sgd_step(d_params, d_cfg)
        return float(loss.data), acc

    for s in range(config.pretrain_t):
        t_step(s, selfreg_only=True)
    for s in range(config.pretrain_d):
        d_step(s)
    log = []
    for s in range(config.steps):
        for _ in range(config.n_t):
            lt = t_step(s)
        for _ in range(config.n_d):
            ld, acc = d_step(s)
        log.append({"step": s, "loss_T": lt[0], "loss_T_adv": lt[1], "loss_T_selfreg": lt[2],
                    "loss_D": ld, "disc_patch_acc": acc})
        if log_every and (s + 1) % log_every == 0:
            recent = log[-log_every:]
            logger.info("da step %d loss_T %.4f (adv %.4f reg %.4f) loss_D %.4f acc %.3f", s + 1,
                        *(np.mean([r[c] for r in recent]) for c in LOG_COLUMNS[1:]))
    return DaResult(tnet, dnet, log)


def write_log(path, log: List[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in log:
            w.writerow([row["step"]] + [repr(float(row[c])) for c in LOG_COLUMNS[1:]])


def heldout_accuracy(real: np.ndarray, synthetic: np.ndarray, tnet: TransformerNet, dnet: DiscriminatorNet,
                     batch: int = 16) -> float:
    """Patch accuracy of the discriminator on transformed held-out real vs held-out synthetic images."""
    correct = total = 0
    for s in range(0, len(real), batch):
        d = dnet.probs(transform(real[s:s + batch], tnet))[..., 1]
        correct += np.count_nonzero(d > 0.5)
        total += d.size
    for s in range(0, len(synthetic), batch):
        d = dnet.probs(synthetic[s:s + batch])[..., 1]
        correct += np.count_nonzero(d < 0.5)
        total += d.size
    return correct / total


class ReverseDomainAdapter(BaseEstimator, TransformerMixin):
    """Learns a map from real-domain images to synthetic-looking ones.

    ``fit(X, synthetic)`` trains adversarially on unpaired stacks of real and
    synthetic images; ``transform(X)`` applies the learned transformer.
    """

    def __init__(self, lam=0.5, n_t=2, n_d=1, steps=2000, batch_size=8, pretrain_t=800, pretrain_d=200,
                 lr_t=1e-3, lr_d=2e-3, momentum=0.9, buffer_capacity=128, channels=64, n_blocks=10,
                 disc_channels=(8, 8, 16, 16, 16), crop=0, random_state=0):
        self.lam = lam
        self.n_t = n_t
        self.n_d = n_d
        self.steps = steps
        self.batch_size = batch_size
        self.pretrain_t = pretrain_t
        self.pretrain_d = pretrain_d
        self.lr_t = lr_t
        self.lr_d = lr_d
        self.momentum = momentum
        self.buffer_capacity = buffer_capacity
        self.channels = channels
        self.n_blocks = n_blocks
        self.disc_channels = disc_channels
        self.crop = crop
        self.random_state = random_state

    def _config(self) -> DaConfig:
        return DaConfig(self.lam, self.n_t, self.n_d, self.steps, self.batch_size, self.pretrain_t,
                        self.pretrain_d, self.lr_t, self.lr_d, self.momentum, self.buffer_capacity,
                        self.channels, self.n_blocks, tuple(self.disc_channels), self.crop, self.random_state)

    def fit(self, X, synthetic):
        X = check_images(X)
        synthetic = check_images(synthetic, "synthetic", X.shape[1:])
        result = train_da(X, synthetic, self._config())
        self.tnet_, self.dnet_, self.log_ = result.tnet, result.dnet, result.log
        self.image_shape_ = X.shape[1:]
        return self

    def transform(self, X):
        X = check_images(X)
        return transform(X, self.tnet_)

    def save(self, t_path, d_path) -> None:
        nn.save_params(t_path, {k: p.data for k, p in self.tnet_.params.items()})
        nn.save_params(d_path, {k: p.data for k, p in self.dnet_.params.items()})

    def load_weights(self, t_path, d_path=None) -> "ReverseDomainAdapter":
        self.tnet_ = TransformerNet(self.channels, self.n_blocks)
        nn.assign_params(self.tnet_.params, nn.load_params(t_path))
        self.dnet_ = DiscriminatorNet(tuple(self.disc_channels))
        if d_path is not None:
            nn.assign_params(self.dnet_.params, nn.load_params(d_path))
        return self
