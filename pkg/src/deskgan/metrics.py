"""Sample-quality metrics against a small pinned feature extractor.

The extractor is a desk-scale stand-in for a large pretrained classifier:
a compact CNN trained on the synthetic dataset, gated at >= 95% held-out
accuracy, checksummed, and reused so metric numbers are comparable across
runs.  It exposes class probabilities (inception-style score) and
penultimate features (Fréchet distances).

Covariance estimates use N−1 normalization plus a 1e-6·I ridge; any oracle
comparison must add the same ridge.
"""

from __future__ import annotations

import hashlib
import logging
import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .layers import Module, Conv2d, Linear, downsample_avg, global_avg_pool, seeded_rng
from .losses import Adam

logger = logging.getLogger(__name__)

COV_RIDGE = 1e-6
PSD_EIG_TOL = -1e-6
SYM_TOL = 1e-8


class MetricContractError(ValueError):
    pass


class NumericalError(RuntimeError):
    pass


@dataclass
class GaussianStats:
    """Mean and covariance of extracted features."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.sigma.shape != (self.mu.size, self.mu.size):
            raise MetricContractError(
                f"sigma shape {self.sigma.shape} does not match mu length {self.mu.size}")

    @staticmethod
    def from_features(feats: np.ndarray, ridge: float = COV_RIDGE) -> "GaussianStats":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 2:
            raise MetricContractError(f"need [N>=2 × F] features, got {feats.shape}")
        mu = feats.mean(axis=0)
        centered = feats - mu
        sigma = centered.T @ centered / (feats.shape[0] - 1)
        sigma += ridge * np.eye(feats.shape[1])
        return GaussianStats(mu, sigma)

    def validate(self) -> None:
        asym = np.abs(self.sigma - self.sigma.T).max()
        if asym > SYM_TOL:
            raise MetricContractError(f"covariance asymmetric by {asym:g} (> {SYM_TOL:g})")
        lo = float(np.linalg.eigvalsh(self.sigma).min())
        if lo < PSD_EIG_TOL:
            raise MetricContractError(f"covariance eigenvalue {lo:g} below {PSD_EIG_TOL:g}")


def matrix_sqrt_psd(m: np.ndarray) -> np.ndarray:
    """Principal square root of a symmetric PSD matrix via eigendecomposition."""
    m = np.asarray(m, dtype=np.float64)
    asym = np.abs(m - m.T).max()
    scale = max(np.abs(m).max(), 1.0)
    if asym > 1e-8 * scale:
        raise MetricContractError(f"matrix_sqrt_psd wants a symmetric input; "
                                  f"asymmetry {asym:g}")
    try:
        vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    except np.linalg.LinAlgError as e:
        cond = float(np.abs(m).max() / max(np.abs(m).min(), 1e-300))
        raise NumericalError(f"eigendecomposition failed (condition ~{cond:g}): {e}") from e
    if vals.min() < PSD_EIG_TOL * scale:
        raise MetricContractError(f"matrix_sqrt_psd input has eigenvalue {vals.min():g} "
                                  f"below tolerance")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def _trace_sqrt_product(sigma_a: np.ndarray, sigma_b: np.ndarray) -> float:
    """Tr((Σa·Σb)^1/2) via the symmetrization Σa^1/2 · Σb · Σa^1/2."""
    a_half = matrix_sqrt_psd(sigma_a)
    inner = a_half @ sigma_b @ a_half
    inner = (inner + inner.T) / 2.0
    vals = np.linalg.eigvalsh(inner)
    return float(np.sqrt(np.clip(vals, 0.0, None)).sum())


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """‖μa−μb‖² + Tr(Σa + Σb − 2·(Σa·Σb)^1/2), clamped at 0."""
    a.validate()
    b.validate()
    if a.mu.shape != b.mu.shape:
        raise MetricContractError(f"feature dims differ: {a.mu.shape} vs {b.mu.shape}")
    mean_term = float(((a.mu - b.mu) ** 2).sum())
    d = mean_term + float(np.trace(a.sigma) + np.trace(b.sigma)) \
        - 2.0 * _trace_sqrt_product(a.sigma, b.sigma)
    if d < -1e-5:
        raise NumericalError(f"Fréchet distance {d:g} below numerical floor")
    return max(d, 0.0)


def inception_score(probs: np.ndarray, splits: int = 10) -> tuple[float, float]:
    """exp(mean KL(p(y|x) ‖ p(y))) per split; returns (mean, std) over splits.

    Rows must be probability distributions; zeros are floored at 1e-12
    inside the KL.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise MetricContractError(f"probs must be [N×K], got shape {probs.shape}")
    rowsum = probs.sum(axis=1)
    if np.abs(rowsum - 1.0).max() > 1e-3:
        raise MetricContractError("probability rows do not sum to 1")
    if splits < 1 or splits > probs.shape[0]:
        raise MetricContractError(f"invalid split count {splits} for N={probs.shape[0]}")
    eps = 1e-12
    scores = []
    for part in np.array_split(probs, splits):
        marginal = part.mean(axis=0)
        kl = (part * (np.log(np.maximum(part, eps)) - np.log(np.maximum(marginal, eps))))
        kl = np.where(part > 0, kl, 0.0).sum(axis=1)
        scores.append(np.exp(kl.mean()))
    return float(np.mean(scores)), float(np.std(scores))


# ---- feature extractor ---------------------------------------------------------


class FeatureExtractor(Module):
    """Small convolutional classifier; penultimate features feed the
    Fréchet metrics, softmax probabilities feed the inception-style score."""

    FEATURE_DIM = 64

    def __init__(self, num_classes: int, resolution: int, seed: int = 0):
        super().__init__()
        self.num_classes = num_classes
        self.resolution = resolution
        self.conv1 = Conv2d(3, 16, 3, pad=1, rng=seeded_rng(seed, "fx.conv1"))
        self.conv2 = Conv2d(16, 32, 3, pad=1, rng=seeded_rng(seed, "fx.conv2"))
        self.conv3 = Conv2d(32, self.FEATURE_DIM, 3, pad=1, rng=seeded_rng(seed, "fx.conv3"))
        self.fc = Linear(self.FEATURE_DIM, num_classes, rng=seeded_rng(seed, "fx.fc"))

    def features(self, images: Tensor) -> Tensor:
        x = downsample_avg(T.relu(self.conv1(images)), 2)
        x = downsample_avg(T.relu(self.conv2(x)), 2)
        x = T.relu(self.conv3(x))
        return global_avg_pool(x)

    def logits(self, images: Tensor) -> Tensor:
        return self.fc(self.features(images))

    def forward(self, images: Tensor) -> Tensor:
        return self.logits(images)

    __call__ = forward


def features_and_probs(extractor: FeatureExtractor, images: np.ndarray,
                       batch: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Penultimate features [N×F] and class probabilities [N×K]."""
    feats, probs = [], []
    extractor.eval()
    with T.no_grad():
        for i in range(0, len(images), batch):
            x = Tensor(images[i:i + batch])
            f = extractor.features(x)
            logit = extractor.fc(f)
            p = T.softmax_rows(logit)
            feats.append(f.data.astype(np.float64))
            probs.append(p.data.astype(np.float64))
    return np.concatenate(feats), np.concatenate(probs)


def train_feature_extractor(images: np.ndarray, labels: np.ndarray, num_classes: int,
                            seed: int = 0, steps: int = 600, batch: int = 64,
                            val_fraction: float = 0.2, min_accuracy: float = 0.95
                            ) -> tuple[FeatureExtractor, float]:
    """Train the metric classifier; raises if the held-out accuracy gate
    (default 95%) is not met."""
    rng = np.random.Generator(np.random.Philox(seed))
    n = len(images)
    order = rng.permutation(n)
    n_val = max(1, int(n * val_fraction))
    val_idx, train_idx = order[:n_val], order[n_val:]
    ext = FeatureExtractor(num_classes, images.shape[-1], seed=seed)
    opt = Adam(list(ext.named_parameters()), lr=1e-3, beta1=0.9, beta2=0.999)
    for _ in range(steps):
        take = rng.choice(train_idx, size=min(batch, len(train_idx)), replace=False)
        x = Tensor(images[take])
        y = labels[take]
        logp = T.log_softmax_rows(ext.logits(x))
        loss = T.neg(T.tmean(T.take_per_row(logp, y)))
        opt.zero_grad()
        loss.backward()
        opt.step()
    _, val_probs = features_and_probs(ext, images[val_idx])
    acc = float((val_probs.argmax(axis=1) == labels[val_idx]).mean())
    if acc < min_accuracy:
        raise RuntimeError(f"feature extractor reached only {acc:.3f} held-out accuracy "
                           f"(gate {min_accuracy}); refusing to use it for metrics")
    return ext, acc


def checksum_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def save_extractor(path, extractor: FeatureExtractor, val_accuracy: float,
                   dataset_info: dict | None = None) -> str:
    """Write the extractor checkpoint and a sibling .sha256 pin; returns the
    checksum."""
    from .trainer import save_checkpoint

    arrays = {f"param/{k}": v.data for k, v in extractor.named_parameters()}
    meta = {"kind": "extractor", "num_classes": extractor.num_classes,
            "resolution": extractor.resolution, "feature_dim": extractor.FEATURE_DIM,
            "val_accuracy": val_accuracy, "dataset": dataset_info or {}}
    save_checkpoint(path, arrays, meta)
    digest = checksum_file(path)
    with open(str(path) + ".sha256", "w") as f:
        f.write(f"{digest}  {str(path).rsplit('/', 1)[-1]}\n")
    return digest


def load_extractor(path, min_accuracy: float = 0.95,
                   verify_checksum: bool = True) -> FeatureExtractor:
    """Load a pinned extractor, enforcing the accuracy gate and (when the
    .sha256 pin is present) the checksum."""
    from .trainer import load_checkpoint, CheckpointError

    if verify_checksum:
        pin = str(path) + ".sha256"
        try:
            with open(pin) as f:
                expected = f.read().split()[0]
        except OSError:
            expected = None
        if expected is not None and checksum_file(path) != expected:
            raise CheckpointError(f"extractor {path} does not match its pinned checksum")
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "extractor":
        raise CheckpointError(f"{path} is not an extractor checkpoint")
    acc = float(meta.get("val_accuracy", 0.0))
    if acc < min_accuracy:
        raise RuntimeError(f"pinned extractor accuracy {acc:.3f} below the "
                           f"{min_accuracy} gate; retrain it")
    ext = FeatureExtractor(int(meta["num_classes"]), int(meta["resolution"]))
    for name, p in ext.named_parameters():
        src = arrays[f"param/{name}"]
        if src.shape != p.data.shape:
            raise CheckpointError(f"extractor entry {name}: shape {src.shape} "
                                  f"vs model {p.data.shape}")
        p.data[...] = src
    return ext


# ---- dataset-level metrics -------------------------------------------------------


def dataset_stats(extractor: FeatureExtractor, images: np.ndarray) -> GaussianStats:
    feats, _ = features_and_probs(extractor, images)
    return GaussianStats.from_features(feats)


def fid_between_image_sets(extractor: FeatureExtractor, a: np.ndarray,
                           b: np.ndarray) -> float:
    return frechet_distance(dataset_stats(extractor, a), dataset_stats(extractor, b))


def generator_metrics(generator, extractor: FeatureExtractor, real_images: np.ndarray,
                      n_samples: int, seed: int, splits: int = 10) -> dict:
    """FID and inception-style score of ``n_samples`` fresh samples against
    the given real set."""
    from .models import sample  # local import to avoid a cycle

    per_class = max(1, n_samples // generator.cfg.num_classes)
    images, _ = sample(generator, per_class, "all", seed)
    fake = images.data.astype(np.float32)
    feats_fake, probs_fake = features_and_probs(extractor, fake)
    stats_fake = GaussianStats.from_features(feats_fake)
    stats_real = dataset_stats(extractor, real_images)
    is_mean, is_std = inception_score(probs_fake, splits=min(splits, len(probs_fake)))
    return {"fid": frechet_distance(stats_real, stats_fake),
            "is_mean": is_mean, "is_std": is_std,
            "n_fake": len(fake)}


def intra_fid(generator, extractor: FeatureExtractor, dataset: tuple[np.ndarray, np.ndarray],
              per_class_n: int, seed: int = 0) -> dict[int, float]:
    """Fréchet distance per class between generated and real feature
    Gaussians; classes with no real samples are omitted from the report."""
    from .models import sample

    if per_class_n < FeatureExtractor.FEATURE_DIM + 1:
        warnings.warn(f"per_class_n={per_class_n} below feature_dim+1="
                      f"{FeatureExtractor.FEATURE_DIM + 1}; covariance may be rank-deficient")
    real_images, real_labels = dataset
    out: dict[int, float] = {}
    for cls in range(generator.cfg.num_classes):
        mask = real_labels == cls
        if not mask.any():
            continue
        real_feats, _ = features_and_probs(extractor, real_images[mask])
        images, _ = sample(generator, per_class_n, cls, seed + cls)
        fake_feats, _ = features_and_probs(extractor, images.data.astype(np.float32))
        out[cls] = frechet_distance(GaussianStats.from_features(real_feats),
                                    GaussianStats.from_features(fake_feats))
    return dict(sorted(out.items()))


def write_metric_reports(path_csv, path_json, summary: dict,
                         per_class: dict[int, float]) -> None:
    """CSV one-row summary plus a structured text report with per-class
    intra-FID."""
    import json

    keys = sorted(summary)
    with open(path_csv, "w") as f:
        f.write(",".join(keys) + "\n")
        f.write(",".join(repr(summary[k]) for k in keys) + "\n")
    with open(path_json, "w") as f:
        json.dump({"summary": summary,
                   "intra_fid": {str(k): v for k, v in per_class.items()}},
                  f, indent=2, sort_keys=True)
        f.write("\n")
