"""Training objectives: span loss, discriminator losses, and alignment losses.

All functions build scalar loss tensors on the active computation record.
Position picks are expressed as one-hot masks times the log distribution,
so gradients flow only through the model's probabilities.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import SpanPrediction

ZERO_NORM_EPS = 1e-12


def _picked_log(alpha: Tensor, index: int, what: str) -> Tensor:
    """log alpha[index] for a distribution shaped (1, T) or (T,)."""
    t = alpha.data.shape[-1]
    if not 0 <= index < t:
        raise ValueError(f"{what} index {index} outside distribution of length {t}")
    onehot = np.zeros(alpha.data.shape)
    onehot[..., index] = 1.0
    return ad.reduce_sum(ad.mul(ad.log(alpha), Tensor(onehot)))


def qa_loss(pred: SpanPrediction, begin: int, end: int) -> Tensor:
    """Span extraction loss: -(log a_b[begin] + log a_e[end]) / 2."""
    picked = ad.add(
        _picked_log(pred.alpha_begin, begin, "begin"),
        _picked_log(pred.alpha_end, end, "end"),
    )
    return ad.mul(picked, -0.5)


def discriminator_loss(probs: Tensor, gold: int) -> Tensor:
    """Negative log-likelihood of the gold language label."""
    return ad.neg(_picked_log(probs, gold, "label"))


def discriminator_loss_batch(probs: Tensor, golds) -> Tensor:
    """Mean NLL over a batch of label distributions shaped (B, L)."""
    if probs.data.ndim != 2:
        raise ad.ShapeError(f"expected (B, L) probabilities, got {probs.shape}")
    n, labels = probs.data.shape
    golds = list(golds)
    if len(golds) != n:
        raise ValueError(f"{len(golds)} labels for {n} rows")
    onehot = np.zeros((n, labels))
    for i, g in enumerate(golds):
        if not 0 <= g < labels:
            raise ValueError(f"label index {g} outside {labels} labels")
        onehot[i, g] = 1.0
    total = ad.reduce_sum(ad.mul(ad.log(probs), Tensor(onehot)))
    return ad.mul(total, -1.0 / n)


def adversarial_loss(probs: Tensor) -> Tensor:
    """KL(uniform || p): zero exactly when the discriminator is uniform.

    For a batch shaped (B, L) this is the mean of the per-row divergences.
    """
    labels = probs.data.shape[-1]
    if labels < 2:
        raise ad.ShapeError("adversarial loss needs at least two labels")
    mean_log = ad.reduce_mean(ad.log(probs))
    return ad.sub(-math.log(labels), mean_log)


def psa_loss(pred_translated: SpanPrediction, pseudo_begin: int, pseudo_end: int) -> Tensor:
    """Span loss against pseudo-labels taken from the English prediction.

    Structurally identical to qa_loss; the supervision positions come from
    the English-side argmax instead of gold annotations.
    """
    return qa_loss(pred_translated, pseudo_begin, pseudo_end)


def qs_loss(h_en: Tensor, h_l: Tensor) -> Tensor:
    """One minus cosine similarity between paired question representations."""
    n_en = float(np.linalg.norm(h_en.data))
    n_l = float(np.linalg.norm(h_l.data))
    if n_en <= ZERO_NORM_EPS or n_l <= ZERO_NORM_EPS:
        raise ValueError("degenerate question representation with zero norm")
    dot = ad.reduce_sum(ad.mul(h_en, h_l))
    inv_en = ad.exp(ad.mul(ad.log(ad.reduce_sum(ad.mul(h_en, h_en))), -0.5))
    inv_l = ad.exp(ad.mul(ad.log(ad.reduce_sum(ad.mul(h_l, h_l))), -0.5))
    return ad.sub(1.0, ad.mul(ad.mul(dot, inv_en), inv_l))
