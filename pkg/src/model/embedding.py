"""
Embedding Network
=================
Small time-delay network over RTF feature frames:

    x (T x 40, dB / 20)
      -> conv1 (40 -> 32, kernel 5) -> ReLU
      -> conv2 (32 -> 32, kernel 3) -> ReLU
      -> stats pool [mean, sqrt(var + 1e-6)] over frames (64)
      -> proj (64 -> 32) -> L2 normalise

trained with an additive angular margin softmax over the training users:

    logit_j = s * cos(theta_j)            j != y
    logit_y = s * cos(theta_y + m)        cos(t + m) = cos t cos m - sin t sin m

Every gradient is analytic (numpy only) and checked against central
differences by gradient_check().
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..config import NetConfig
from ..errors import (
    ConfigError,
    DimensionMismatchError,
    LabelIndexError,
    TooShortError,
    TrainingDivergedError,
)
from ..dsp.features import FeatureMatrix
from ..dsp.signal_core import make_rng

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "earcan-tdnn"
CHECKPOINT_VERSION = 1
POOL_EPS = 1e-6

TENSOR_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "proj_w", "proj_b", "class_weights")

FeatureInput = Union[FeatureMatrix, np.ndarray]


@dataclass
class NetParams:
    conv1_w: np.ndarray          # (C1, D, K1)
    conv1_b: np.ndarray          # (C1,)
    conv2_w: np.ndarray          # (C2, C1, K2)
    conv2_b: np.ndarray          # (C2,)
    proj_w: np.ndarray           # (E, 2 * C2)
    proj_b: np.ndarray           # (E,)
    class_weights: np.ndarray    # (C, E), unit rows
    input_scale_db: float = 20.0

    def tensors(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in TENSOR_NAMES}

    def copy(self) -> "NetParams":
        return NetParams(**{n: t.copy() for n, t in self.tensors().items()},
                         input_scale_db=self.input_scale_db)

    @property
    def in_dim(self) -> int:
        return self.conv1_w.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.proj_w.shape[0]

    @property
    def n_classes(self) -> int:
        return self.class_weights.shape[0]

    @property
    def min_frames(self) -> int:
        return self.conv1_w.shape[2] + self.conv2_w.shape[2] - 1

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.tensors().values())

    def renormalize_classes(self) -> None:
        norms = np.linalg.norm(self.class_weights, axis=1, keepdims=True)
        self.class_weights /= np.maximum(norms, 1e-12)


@dataclass(frozen=True, eq=False)
class Embedding:
    """Unit-norm user signature."""
    vector: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.vector)


@dataclass
class TrainResult:
    params: NetParams
    loss_trace: List[float] = field(default_factory=list)


# =============================================================================
# INIT
# =============================================================================

def init_net(seed: int, arch: NetConfig, n_classes: int = 2) -> NetParams:
    """uniform(+/-1/sqrt(fan_in)) weights, zero biases, unit-norm class rows."""
    dims = [arch.in_dim, arch.conv1_channels, arch.conv1_kernel,
            arch.conv2_channels, arch.conv2_kernel, arch.embed_dim, n_classes]
    if min(dims) < 1:
        raise ConfigError(f"architecture dimensions must be positive, got {dims}", key="net")

    rng = make_rng(seed, 0x7D)

    def uniform(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    params = NetParams(
        conv1_w=uniform((arch.conv1_channels, arch.in_dim, arch.conv1_kernel),
                        arch.in_dim * arch.conv1_kernel),
        conv1_b=np.zeros(arch.conv1_channels),
        conv2_w=uniform((arch.conv2_channels, arch.conv1_channels, arch.conv2_kernel),
                        arch.conv1_channels * arch.conv2_kernel),
        conv2_b=np.zeros(arch.conv2_channels),
        proj_w=uniform((arch.embed_dim, 2 * arch.conv2_channels), 2 * arch.conv2_channels),
        proj_b=np.zeros(arch.embed_dim),
        class_weights=uniform((n_classes, arch.embed_dim), arch.embed_dim),
        input_scale_db=arch.input_scale_db,
    )
    params.renormalize_classes()
    return params


# =============================================================================
# FORWARD
# =============================================================================

def _values(feats: FeatureInput) -> np.ndarray:
    return feats.values if isinstance(feats, FeatureMatrix) else np.asarray(feats, dtype=np.float64)


def _conv(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Valid 1-D convolution over time. x (T, D), w (C, D, K) -> (T - K + 1, C)."""
    windows = sliding_window_view(x, w.shape[2], axis=0)      # (T', D, K)
    return np.einsum("tdk,cdk->tc", windows, w) + b


def _conv_backward(x: np.ndarray, w: np.ndarray,
                   grad_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    windows = sliding_window_view(x, w.shape[2], axis=0)
    grad_w = np.einsum("tc,tdk->cdk", grad_out, windows)
    grad_b = grad_out.sum(axis=0)
    grad_windows = np.einsum("tc,cdk->tdk", grad_out, w)
    grad_x = np.zeros_like(x)
    n = grad_out.shape[0]
    for k in range(w.shape[2]):
        grad_x[k:k + n] += grad_windows[:, :, k]
    return grad_w, grad_b, grad_x


def stats_pool(a: np.ndarray) -> np.ndarray:
    """[mean, sqrt(var + eps)] over frames; order- and duplication-invariant."""
    mu = a.mean(axis=0)
    var = ((a - mu) ** 2).mean(axis=0)
    return np.concatenate([mu, np.sqrt(var + POOL_EPS)])


def _pool_backward(a: np.ndarray, grad_pooled: np.ndarray) -> np.ndarray:
    n, c = a.shape
    mu = a.mean(axis=0)
    sd = np.sqrt(((a - mu) ** 2).mean(axis=0) + POOL_EPS)
    grad_mu, grad_sd = grad_pooled[:c], grad_pooled[c:]
    grad_var = grad_sd / (2 * sd)
    return grad_mu / n + grad_var * 2 * (a - mu) / n


@dataclass
class ForwardCache:
    x: np.ndarray
    h1: np.ndarray
    a1: np.ndarray
    h2: np.ndarray
    a2: np.ndarray
    pooled: np.ndarray
    z: np.ndarray
    embedding: np.ndarray

    def relu_pattern(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.h1 > 0, self.h2 > 0


def forward_cached(params: NetParams, feats: FeatureInput) -> ForwardCache:
    values = _values(feats)
    if values.ndim != 2 or values.shape[1] != params.in_dim:
        raise DimensionMismatchError(
            f"feature matrix has shape {values.shape}, network expects (*, {params.in_dim})"
        )
    if values.shape[0] < params.min_frames:
        raise TooShortError(f"{values.shape[0]} frames < {params.min_frames} needed by the network")

    x = values / params.input_scale_db
    h1 = _conv(x, params.conv1_w, params.conv1_b)
    a1 = np.maximum(h1, 0.0)
    h2 = _conv(a1, params.conv2_w, params.conv2_b)
    a2 = np.maximum(h2, 0.0)
    pooled = stats_pool(a2)
    z = params.proj_w @ pooled + params.proj_b
    embedding = z / max(float(np.linalg.norm(z)), 1e-12)
    return ForwardCache(x, h1, a1, h2, a2, pooled, z, embedding)


def forward(params: NetParams, feats: FeatureInput) -> Embedding:
    return Embedding(forward_cached(params, feats).embedding)


def embed_all(params: NetParams, feats: Sequence[FeatureInput]) -> np.ndarray:
    """Embeddings stacked as rows."""
    return np.stack([forward_cached(params, f).embedding for f in feats])


def backward_from_embedding(params: NetParams, cache: ForwardCache,
                            grad_embedding: np.ndarray) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    """Gradients of a scalar w.r.t. every tensor and the feature values, given dJ/de."""
    norm = max(float(np.linalg.norm(cache.z)), 1e-12)
    e = cache.embedding
    grad_z = (grad_embedding - e * float(e @ grad_embedding)) / norm

    grads = {
        "proj_w": np.outer(grad_z, cache.pooled),
        "proj_b": grad_z.copy(),
        "class_weights": np.zeros_like(params.class_weights),
    }
    grad_pooled = params.proj_w.T @ grad_z
    grad_h2 = _pool_backward(cache.a2, grad_pooled) * (cache.h2 > 0)
    grads["conv2_w"], grads["conv2_b"], grad_a1 = _conv_backward(cache.a1, params.conv2_w, grad_h2)
    grad_h1 = grad_a1 * (cache.h1 > 0)
    grads["conv1_w"], grads["conv1_b"], grad_x = _conv_backward(cache.x, params.conv1_w, grad_h1)

    ordered = {name: grads[name] for name in TENSOR_NAMES}
    return ordered, grad_x / params.input_scale_db


# =============================================================================
# LOSS
# =============================================================================

def _check_margin(s: float, m: float) -> None:
    if s <= 0:
        raise ConfigError(f"scale must be > 0, got {s}", key="net.scale")
    if not 0 <= m < math.pi / 2:
        raise ConfigError(f"margin must be in [0, pi/2), got {m}", key="net.margin")


def _aam(e: np.ndarray, label: int, class_weights: np.ndarray, s: float,
         m: float) -> Tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """(loss, logits, dL/de, dL/dW)."""
    n_classes = class_weights.shape[0]
    if not 0 <= label < n_classes:
        raise LabelIndexError(f"label {label} out of range for {n_classes} classes")
    _check_margin(s, m)

    cos = class_weights @ e
    cos_y = float(np.clip(cos[label], -1.0, 1.0))
    sin_y = math.sqrt(max(0.0, 1.0 - cos_y * cos_y))

    logits = s * cos
    logits[label] = s * (cos_y * math.cos(m) - sin_y * math.sin(m))
    shifted = logits - logits.max()
    log_norm = math.log(float(np.sum(np.exp(shifted))))
    loss = log_norm - float(shifted[label])

    grad_logits = np.exp(shifted - log_norm)
    grad_logits[label] -= 1.0
    grad_cos = s * grad_logits
    # d cos(t + m) / d cos t = cos m + sin m * cos t / sin t
    slope = math.cos(m) + (math.sin(m) * cos_y / sin_y if sin_y > 1e-12 else 0.0)
    grad_cos[label] = s * grad_logits[label] * slope

    return loss, logits, class_weights.T @ grad_cos, np.outer(grad_cos, e)


def aam_loss(embedding: Embedding, label: int, class_weights: np.ndarray,
             s: float, m: float) -> Tuple[float, np.ndarray]:
    """Additive angular margin softmax loss and its logits."""
    loss, logits, _, _ = _aam(embedding.vector, label, class_weights, s, m)
    return loss, logits


def loss_and_gradients(params: NetParams, feats: FeatureInput, label: int, hyper: NetConfig,
                       scale: float = 1.0) -> Tuple[float, Dict[str, np.ndarray]]:
    cache = forward_cached(params, feats)
    loss, _, grad_e, grad_w = _aam(cache.embedding, label, params.class_weights,
                                   hyper.scale, hyper.margin)
    grads, _ = backward_from_embedding(params, cache, scale * grad_e)
    grads["class_weights"] = scale * grad_w
    return scale * loss, grads


def backward(params: NetParams, feats: FeatureInput, label: int, hyper: NetConfig,
             scale: float = 1.0) -> Dict[str, np.ndarray]:
    """Analytic gradient of scale * aam_loss(forward(params, feats)) for every tensor."""
    return loss_and_gradients(params, feats, label, hyper, scale)[1]


# =============================================================================
# GRADIENT CHECK
# =============================================================================

def _loss_only(params: NetParams, x: np.ndarray, label: int, hyper: NetConfig):
    cache = forward_cached(params, x)
    loss = _aam(cache.embedding, label, params.class_weights, hyper.scale, hyper.margin)[0]
    return loss, cache.relu_pattern()


def _same_pattern(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def gradient_check(params: NetParams, feats: FeatureInput, label: int, hyper: NetConfig,
                   h: float = 1e-4, max_entries: Optional[int] = None,
                   seed: int = 0) -> Dict[str, float]:
    """Relative error ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-8) per tensor.

    Includes the feature input under the key "input". Entries whose +/-h step
    flips any ReLU are skipped. max_entries samples that many entries per tensor.
    """
    x = np.array(_values(feats), dtype=np.float64)
    cache = forward_cached(params, x)
    _, _, grad_e, grad_w = _aam(cache.embedding, label, params.class_weights,
                                hyper.scale, hyper.margin)
    analytic, grad_x = backward_from_embedding(params, cache, grad_e)
    analytic["class_weights"] = grad_w
    analytic["input"] = grad_x
    base_pattern = cache.relu_pattern()

    rng = make_rng(seed, 0x6C)
    work = params.copy()
    targets = dict(work.tensors())
    targets["input"] = x

    errors = {}
    for name, tensor in targets.items():
        flat = tensor.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = np.sort(rng.choice(flat.size, size=max_entries, replace=False))

        numeric, kept = [], []
        for i in indices:
            original = flat[i]
            flat[i] = original + h
            plus, pattern_plus = _loss_only(work, x, label, hyper)
            flat[i] = original - h
            minus, pattern_minus = _loss_only(work, x, label, hyper)
            flat[i] = original
            if _same_pattern(pattern_plus, base_pattern) and _same_pattern(pattern_minus, base_pattern):
                numeric.append((plus - minus) / (2 * h))
                kept.append(i)

        a = analytic[name].reshape(-1)[kept]
        n = np.array(numeric)
        denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(n)), 1e-8)
        errors[name] = float(np.linalg.norm(a - n)) / denom if kept else 0.0
    return errors


# =============================================================================
# TRAINING
# =============================================================================

def train(dataset: Sequence[Tuple[FeatureInput, int]], hyper: NetConfig, seed: int,
          n_classes: Optional[int] = None) -> TrainResult:
    """SGD with momentum over seeded mini-batches; one mean loss per epoch."""
    labels = [int(label) for _, label in dataset]
    if len(set(labels)) < 2:
        raise ConfigError("training needs at least 2 users", key="population.n_users")
    n_classes = n_classes or max(labels) + 1

    params = init_net(seed, hyper, n_classes)
    velocity = {name: np.zeros_like(t) for name, t in params.tensors().items()}
    rng = make_rng(seed, 0x5B)
    trace: List[float] = []

    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(len(dataset))
        epoch_losses = []
        for start in range(0, len(order), hyper.batch):
            batch = order[start:start + hyper.batch]
            total = {name: np.zeros_like(t) for name, t in params.tensors().items()}
            for i in batch:
                feats, label = dataset[i]
                loss, grads = loss_and_gradients(params, feats, int(label), hyper)
                epoch_losses.append(loss)
                for name, g in grads.items():
                    total[name] += g
            for name, tensor in params.tensors().items():
                velocity[name] = hyper.momentum * velocity[name] - hyper.lr * total[name] / len(batch)
                tensor += velocity[name]
            params.renormalize_classes()

        mean_loss = float(np.mean(epoch_losses))
        if not math.isfinite(mean_loss) or not params.is_finite():
            raise TrainingDivergedError(epoch)
        trace.append(mean_loss)
        logger.debug(f"epoch {epoch}/{hyper.epochs}: loss {mean_loss:.4f}")

    if trace:
        logger.info(f"Trained {n_classes}-class embedding: loss {trace[0]:.3f} -> {trace[-1]:.3f}")
    return TrainResult(params, trace)


# =============================================================================
# CHECKPOINT
# =============================================================================

def save_checkpoint(path: Path, params: NetParams) -> None:
    """JSON: versioned header, then tensors in declared order, row-major."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "input_scale_db": params.input_scale_db,
        "tensors": [
            {"name": name, "shape": list(t.shape), "data": t.reshape(-1).tolist()}
            for name, t in params.tensors().items()
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_checkpoint(path: Path) -> NetParams:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint header {doc.get('format')}/{doc.get('version')}",
                          key="model.checkpoint")
    names = [t["name"] for t in doc["tensors"]]
    if tuple(names) != TENSOR_NAMES:
        raise ConfigError(f"checkpoint tensors out of order: {names}", key="model.checkpoint")
    tensors = {t["name"]: np.array(t["data"], dtype=np.float64).reshape(t["shape"])
               for t in doc["tensors"]}
    return NetParams(**tensors, input_scale_db=float(doc["input_scale_db"]))
