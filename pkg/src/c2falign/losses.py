"""Contrastive, distillation and matching objectives."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DomainError, ShapeError
from .tensor import Tensor


@dataclass
class ContrastiveBatchView:
    """Operands of the two contrastive softmaxes.

    Candidates are the queue snapshot followed by the in-batch images, so
    every speech anchor finds its paired image among them.
    """

    speech_cls: Tensor          # [B, d]
    candidate_cls: Tensor       # [C, d]
    candidate_ids: np.ndarray   # [C]
    batch_image_cls: Tensor     # [B, d]
    batch_image_ids: np.ndarray  # [B], image paired with each speech
    tau: Tensor


@dataclass
class LossBundle:
    l_sic: float
    l_sic_mod: float
    l_sim: float
    l_total: float
    p_s2i: np.ndarray
    n_sim_negatives: int = 0


def sic_probabilities(view: ContrastiveBatchView) -> tuple[Tensor, Tensor]:
    """Speech->image over all candidates and image->speech over the batch."""
    if view.candidate_cls.shape[0] == 0:
        raise ContractError("contrastive softmax needs at least one candidate")
    s2i = T.matmul(view.speech_cls, T.swap_last(view.candidate_cls))
    i2s = T.matmul(view.batch_image_cls, T.swap_last(view.speech_cls))
    return T.softmax_rows(s2i, view.tau), T.softmax_rows(i2s, view.tau)


def build_multi_positive_targets(anchor_ids, candidate_ids) -> np.ndarray:
    """Rows spread mass 1/n over the n candidates whose id matches the anchor."""
    anchor_ids = np.asarray(anchor_ids).reshape(-1, 1)
    match = (anchor_ids == np.asarray(candidate_ids).reshape(1, -1)).astype(np.float64)
    counts = match.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        bad = anchor_ids[counts[:, 0] == 0, 0]
        raise ContractError(f"anchors without a positive candidate: {bad[:5].tolist()}")
    return match / counts


def sic_loss(p_s2i: Tensor, p_i2s: Tensor, y_s2i, y_i2s) -> Tensor:
    return T.mul(T.add(T.cross_entropy(y_s2i, p_s2i), T.cross_entropy(y_i2s, p_i2s)), 0.5)


def momentum_pseudo_targets(teacher_cls: Tensor, candidate_cls, tau) -> Tensor:
    """Soft speech->image targets from the EMA speech embeddings; carries no graph."""
    if teacher_cls.requires_grad:
        raise ContractError("pseudo-targets must come from the no-gradient teacher path")
    tau_value = tau.item() if isinstance(tau, Tensor) else float(tau)
    with T.no_grad():
        sims = T.matmul(teacher_cls, T.swap_last(T.as_tensor(candidate_cls)))
        return T.softmax_rows(sims, tau_value)


def sic_mod_loss(l_sic: Tensor, q_s2i: Tensor, p_s2i: Tensor, alpha: float) -> Tensor:
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha must lie in [0, 1], got {alpha}")
    if q_s2i.shape != p_s2i.shape:
        raise ContractError(f"pseudo-targets {q_s2i.shape} and predictions {p_s2i.shape} "
                            "cover different candidate sets")
    q = q_s2i.detach() if q_s2i.requires_grad else q_s2i
    return T.add(T.mul(l_sic, 1.0 - alpha), T.mul(T.kl_divergence(q, p_s2i), alpha))


def sim_loss(probs: Tensor, labels) -> Tensor:
    """Mean two-way cross-entropy; label 1 means matched."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(labels) == 0:
        raise ContractError("matching loss over an empty batch")
    if probs.shape != (len(labels), 2):
        raise ShapeError(f"sim_loss: probs {probs.shape} vs {len(labels)} labels")
    y = np.zeros((len(labels), 2))
    y[np.arange(len(labels)), labels] = 1.0
    return T.cross_entropy(y, probs)


def total_loss(l_sic_mod, l_sim):
    """Unit-weight sum; accepts tensors or plain floats."""
    return l_sic_mod + l_sim
