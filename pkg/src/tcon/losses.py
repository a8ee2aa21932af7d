"""Classification, attention and domain losses, and the two training objectives."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor

PROB_EPS = 1e-12
SIGN_MODES = ("paper", "symmetric")


class EmptyDomainBatch(UserWarning):
    """A domain loss was asked to score an empty set of features."""


@dataclass
class LossBundle:
    c_y: float
    c_a: float
    c_dv: float
    c_ds: float
    generator_objective: float
    discriminator_objective: float
    n_source: int = 0
    n_pseudo: int = 0
    n_pairs: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _clamp(p: Tensor) -> Tensor:
    return nx.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def attention_loss(predicted: Tensor, ground_truth) -> Tensor:
    """Mean squared error over segment weights, averaged over videos."""
    ground_truth = nx.tensor(ground_truth)
    if predicted.shape != ground_truth.shape:
        raise ShapeError(f"attention shapes differ: {predicted.shape} vs {ground_truth.shape}")
    diff = predicted - ground_truth
    return nx.mean(diff * diff)


def cross_entropy(probs: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.intp)
    picked = probs[np.arange(len(labels)), labels]
    return -nx.mean(nx.log(_clamp(picked)))


def classification_loss(source_probs: Tensor, source_labels, target_probs: Tensor | None = None,
                        target_labels=None) -> Tensor:
    """Source cross-entropy plus cross-entropy on accepted pseudo-labelled targets.

    An empty target set contributes nothing.
    """
    loss = cross_entropy(source_probs, source_labels)
    if target_probs is not None and target_labels is not None and len(target_labels) > 0:
        loss = loss + cross_entropy(target_probs, target_labels)
    return loss


def pseudo_label(prediction, threshold: float) -> int | None:
    """Argmax class if its probability reaches ``threshold``; ties go to the lowest index."""
    p = np.asarray(prediction, dtype=np.float64)
    k = int(np.argmax(p))
    return k if p[k] >= threshold else None


def pseudo_labels(predictions: np.ndarray, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`pseudo_label`: returns ``(accepted_rows, labels)``."""
    predictions = np.asarray(predictions)
    labels = np.argmax(predictions, axis=1)
    rows = np.flatnonzero(predictions[np.arange(len(labels)), labels] >= threshold)
    return rows, labels[rows]


def binary_cross_entropy(probs: Tensor, label: int) -> Tensor:
    p = _clamp(probs)
    return -nx.mean(nx.log(p)) if label == 1 else -nx.mean(nx.log(1.0 - p))


def domain_loss(positive: Tensor | None, negative: Tensor | None) -> Tensor:
    """Mean BCE of discriminator outputs on label-1 items plus mean BCE on label-0 items."""
    if positive is None or negative is None or positive.size == 0 or negative.size == 0:
        warnings.warn("domain loss over an empty feature set is 0", EmptyDomainBatch, stacklevel=2)
        return Tensor(0.0)
    return binary_cross_entropy(positive, 1) + binary_cross_entropy(negative, 0)


def video_domain_loss(disc, target_feats: Tensor | None, aligned_feats: Tensor | None) -> Tensor:
    """Target video features are label 1, target-aligned source video features label 0."""
    if target_feats is None or aligned_feats is None or target_feats.size == 0 or aligned_feats.size == 0:
        return domain_loss(None, None)
    return domain_loss(disc(target_feats), disc(aligned_feats))


def segment_domain_loss(disc, source_segs: Tensor | None, aligned_segs: Tensor | None) -> Tensor:
    """Source segments are label 1, target-aligned source segments label 0."""
    if source_segs is None or aligned_segs is None or source_segs.size == 0 or aligned_segs.size == 0:
        return domain_loss(None, None)
    return domain_loss(disc(source_segs), disc(aligned_segs))


def _check(lambda_a: float, lambda_d: float, sign_mode: str) -> None:
    if lambda_a < 0 or lambda_d < 0:
        raise ValueError(f"trade-offs must be nonnegative, got lambda_a={lambda_a}, lambda_d={lambda_d}")
    if sign_mode not in SIGN_MODES:
        raise ValueError(f"sign_mode must be one of {SIGN_MODES}, got {sign_mode!r}")


def objectives(c_y, c_a, c_dv, c_ds, lambda_a: float, lambda_d: float, sign_mode: str = "paper"):
    """Generator and discriminator objectives from the four loss terms.

    ``paper``: ``c_y + lambda_a*c_a - lambda_d*(c_dv - c_ds)``;
    ``symmetric``: ``c_y + lambda_a*c_a - lambda_d*(c_dv + c_ds)``.
    The discriminators always minimise ``c_dv + c_ds``.
    """
    _check(lambda_a, lambda_d, sign_mode)
    adv = c_dv - c_ds if sign_mode == "paper" else c_dv + c_ds
    return c_y + lambda_a * c_a - lambda_d * adv, c_dv + c_ds


def reversal_lambdas(lambda_d: float, sign_mode: str = "paper") -> tuple[float, float]:
    """Gradient-reversal factors for the (video, segment) discriminator inputs.

    With these, one backward pass over ``c_y + lambda_a*c_a + c_dv + c_ds`` gives
    the generator the gradient of its objective and the discriminators theirs.
    """
    _check(0.0, lambda_d, sign_mode)
    return lambda_d, (-lambda_d if sign_mode == "paper" else lambda_d)
