"""CNN-CRF monocular depth: unary regressor, pairwise smoothing and training."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from sklearn.base import BaseEstimator

from . import nn
from .crf import CrfInstance, map_inference, nll
from .superpixel import SimilarityGraph, SuperpixelMap, broadcast, build_graph, pool_depth, slic_segment
from .validation import check_depths, check_images

logger = logging.getLogger(__name__)

MIN_DEPTH = 1e-3


class UnaryNet:
    """Conv stack, superpixel mean pooling, then a per-superpixel FC head."""

    def __init__(self, conv_channels=(8, 16, 16), hidden=(32, 16), seed=0, slope=0.01):
        self.conv_channels = tuple(conv_channels)
        self.hidden = tuple(hidden)
        self.slope = slope
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0A7]))
        self.params: Dict[str, nn.Parameter] = {}
        c_in = 1
        for i, c in enumerate(self.conv_channels):
            self.params[f"conv{i}.w"] = nn.he_uniform(rng, (3, 3, c_in, c), 9 * c_in, f"conv{i}.w")
            self.params[f"conv{i}.b"] = nn.zeros((c,), f"conv{i}.b")
            c_in = c
        sizes = (c_in,) + self.hidden + (1,)
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.params[f"fc{i}.w"] = nn.he_uniform(rng, (a, b), a, f"fc{i}.w")
            self.params[f"fc{i}.b"] = nn.zeros((b,), f"fc{i}.b")
        self.n_fc = len(sizes) - 1

    def features(self, image: np.ndarray) -> nn.Tensor:
        x = nn.Tensor(image[None, :, :, None])
        for i in range(len(self.conv_channels)):
            x = nn.leaky_relu(nn.conv2d(x, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"], pad=1), self.slope)
        return x

    def head(self, pooled: nn.Tensor) -> nn.Tensor:
        z = pooled
        for i in range(self.n_fc):
            z = nn.fully_connected(z, self.params[f"fc{i}.w"], self.params[f"fc{i}.b"])
            if i < self.n_fc - 1:
                z = nn.leaky_relu(z, self.slope)
        return nn.reshape(z, (z.shape[0],))

    def forward(self, image: np.ndarray, pool) -> nn.Tensor:
        return self.head(nn.segment_mean(self.features(image), pool))

    def state(self) -> Dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}


def unary_forward(image: np.ndarray, spmap: SuperpixelMap, net: UnaryNet) -> nn.Tensor:
    """Regressed depth per superpixel, differentiable in the net's parameters."""
    if image.shape != spmap.labels.shape:
        raise nn.ShapeError(f"image shape {image.shape} does not match superpixel map {spmap.labels.shape}")
    return net.forward(image, nn.pooling_matrix(spmap.labels, spmap.n_segments))


@dataclass
class PreparedImage:
    """Everything per image that does not depend on the model."""

    image: np.ndarray
    spmap: SuperpixelMap
    graph: SimilarityGraph  # restricted to kept nodes
    pool: object
    kept: np.ndarray
    y: Optional[np.ndarray] = None


def prepare(image, depth=None, p_target=64, compactness=0.1, histogram_bins=16,
            gamma_intensity=10.0, gamma_histogram=5.0) -> PreparedImage:
    spmap = slic_segment(image, p_target, compactness)
    graph = build_graph(image, spmap, histogram_bins, gamma_intensity, gamma_histogram)
    if depth is None:
        kept = np.arange(spmap.n_segments)
        y = None
    else:
        pooled = pool_depth(depth, spmap)
        kept, y = pooled.kept, pooled.values
    if len(kept) < spmap.n_segments:
        remap = np.full(spmap.n_segments, -1)
        remap[kept] = np.arange(len(kept))
        pool = nn.pooling_matrix(remap[spmap.labels], len(kept))
        graph = graph.subgraph(kept)
    else:
        pool = nn.pooling_matrix(spmap.labels, spmap.n_segments)
    return PreparedImage(image, spmap, graph, pool, kept, y)


def log10_error(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean ``|log10(pred) - log10(truth)|`` over finite truth entries."""
    ok = np.isfinite(truth) & (truth > 0)
    return float(np.mean(np.abs(np.log10(np.maximum(pred[ok], MIN_DEPTH)) - np.log10(truth[ok]))))


class CrfDepthEstimator(BaseEstimator):
    """Superpixel CRF depth regressor trained by exact likelihood.

    ``fit`` takes a stack of images in [0, 1] and their depth maps (``inf`` for
    rays that hit nothing); ``predict`` returns one depth map per image.
    """

    def __init__(
        self,
        p_target=64,
        compactness=0.1,
        histogram_bins=16,
        gamma_intensity=10.0,
        gamma_histogram=5.0,
        conv_channels=(8, 16, 16),
        hidden=(32, 16),
        epochs=20,
        learning_rate=1e-5,
        momentum=0.9,
        weight_decay=0.0007,
        lr_decay_factor=0.8,
        lr_decay_every=20,
        lambda_beta=0.0007,
        beta_init=1.0,
        random_state=0,
        verbose=False,
    ):
        self.p_target = p_target
        self.compactness = compactness
        self.histogram_bins = histogram_bins
        self.gamma_intensity = gamma_intensity
        self.gamma_histogram = gamma_histogram
        self.conv_channels = conv_channels
        self.hidden = hidden
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_decay_factor = lr_decay_factor
        self.lr_decay_every = lr_decay_every
        self.lambda_beta = lambda_beta
        self.beta_init = beta_init
        self.random_state = random_state
        self.verbose = verbose

    # -- helpers ---------------------------------------------------------------
    def _prepare(self, image, depth=None) -> PreparedImage:
        return prepare(image, depth, self.p_target, self.compactness, self.histogram_bins,
                       self.gamma_intensity, self.gamma_histogram)

    def _build(self, mean_depth: float):
        self.net_ = UnaryNet(self.conv_channels, self.hidden, seed=self.random_state)
        # start the head at the average depth so early likelihoods are sane
        self.net_.params[f"fc{self.net_.n_fc - 1}.b"].data[:] = mean_depth
        self.beta_ = nn.Parameter(np.full(2, float(self.beta_init)), name="beta")

    def _sgd_configs(self):
        theta = nn.SgdConfig(self.learning_rate, self.momentum, self.weight_decay,
                             self.lr_decay_factor, self.lr_decay_every)
        # beta carries its own L2 term inside the likelihood
        beta = nn.SgdConfig(self.learning_rate, self.momentum, 0.0, self.lr_decay_factor, self.lr_decay_every)
        return theta, beta

    def _instance_loss(self, prep: PreparedImage):
        h = self.net_.forward(prep.image, prep.pool)
        inst = CrfInstance(prep.graph, h.data, prep.y)
        loss, grad_h, grad_beta = nll(inst, self.beta_.data, self.lambda_beta)
        return h, loss, grad_h, grad_beta

    def _predict_prepared(self, prep: PreparedImage) -> np.ndarray:
        h = self.net_.forward(prep.image, prep.pool).data
        return np.maximum(map_inference(CrfInstance(prep.graph, h), self.beta_.data), MIN_DEPTH)

    def _validation_error(self, preps: List[PreparedImage]) -> float:
        return float(np.mean([log10_error(self._predict_prepared(p), p.y) for p in preps]))

    # -- estimator API -----------------------------------------------------------
    def fit(self, X, y, X_val=None, y_val=None):
        X = check_images(X)
        y = check_depths(y, X)
        train = [self._prepare(img, dep) for img, dep in zip(X, y)]
        if not train:
            raise ValueError("empty training set")
        val = []
        if X_val is not None:
            X_val = check_images(X_val, "X_val", X.shape[1:])
            y_val = check_depths(y_val, X_val, "y_val")
            val = [self._prepare(img, dep) for img, dep in zip(X_val, y_val)]
        self._build(float(np.mean(np.concatenate([p.y for p in train]))))
        theta_cfg, beta_cfg = self._sgd_configs()
        theta = list(self.net_.params.values())
        rng = np.random.default_rng(np.random.SeedSequence([self.random_state, 0x7124]))
        self.history_ = []
        best = (np.inf, -1, None)
        for epoch in range(self.epochs):
            losses = []
            for step, idx in enumerate(rng.permutation(len(train))):
                nn.zero_grad(theta + [self.beta_])
                h, loss, grad_h, grad_beta = self._instance_loss(train[idx])
                if not np.isfinite(loss):
                    raise FloatingPointError(f"CRF loss is non-finite at epoch {epoch} step {step}")
                h.backward(grad_h)
                self.beta_.grad[:] = grad_beta
                nn.sgd_step(theta, theta_cfg, epoch)
                nn.sgd_step([self.beta_], beta_cfg, epoch)
                np.maximum(self.beta_.data, 0.0, out=self.beta_.data)
                losses.append(loss / len(train[idx].y))
            val_err = self._validation_error(val) if val else float("nan")
            self.history_.append({"epoch": epoch, "train_nll": float(np.mean(losses)), "val_log10": val_err,
                                  "beta": self.beta_.data.tolist()})
            if self.verbose:
                logger.info("epoch %d nll/node %.4f val log10 %.4f beta %s", epoch, np.mean(losses), val_err,
                            np.round(self.beta_.data, 4).tolist())
            score = val_err if val else -epoch
            if score < best[0]:
                best = (score, epoch, (self.net_.state(), self.beta_.data.copy()))
        self.best_epoch_ = best[1]
        state, beta = best[2]
        nn.assign_params(self.net_.params, state)
        self.beta_.data[:] = beta
        return self

    def predict(self, X) -> np.ndarray:
        X = check_images(X)
        return np.stack([self.predict_one(img) for img in X])

    def predict_one(self, image: np.ndarray) -> np.ndarray:
        prep = self._prepare(image)
        return broadcast(self._predict_prepared(prep), prep.kept, prep.spmap)

    # -- persistence ---------------------------------------------------------------
    def save(self, path) -> None:
        """Parameters to a checkpoint file plus a ``.txt`` sidecar with beta and settings."""
        path = Path(path)
        blocks = dict(self.net_.state())
        blocks["beta"] = self.beta_.data.copy()
        nn.save_params(path, blocks)
        lines = [f"beta={' '.join(repr(float(b)) for b in self.beta_.data)}",
                 f"best_epoch={getattr(self, 'best_epoch_', -1)}"]
        for k, v in sorted(self.get_params().items()):
            if isinstance(v, (tuple, list)):
                v = ",".join(str(i) for i in v)
            lines.append(f"{k}={v}")
        sidecar = path.with_name(path.name + ".txt")
        sidecar.write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "CrfDepthEstimator":
        path = Path(path)
        sidecar = path.with_name(path.name + ".txt")
        settings = {}
        for line in sidecar.read_text(encoding="utf-8").splitlines():
            key, _, value = line.partition("=")
            settings[key] = value
        est = cls()
        kwargs = {}
        for k, default in est.get_params().items():
            if k not in settings:
                continue
            raw = settings[k]
            if isinstance(default, tuple):
                kwargs[k] = tuple(int(t) for t in raw.split(",") if t)
            elif isinstance(default, bool):
                kwargs[k] = raw == "True"
            else:
                kwargs[k] = type(default)(raw)
        est.set_params(**kwargs)
        values = nn.load_params(path)
        est._build(0.0)
        nn.assign_params(est.net_.params, values)
        est.beta_.data[:] = values["beta"]
        est.best_epoch_ = int(settings.get("best_epoch", -1))
        return est

