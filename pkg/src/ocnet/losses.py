"""Training objectives: smoothed cross-entropy, batch-hard triplet, Separation Loss, weighting."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericError, ValidationError

NORM_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.8
    lambda2: float = 0.5
    lambda3: float = 0.25
    lambda4: float = 0.25
    gamma: float = 1.0
    margin: float = 0.3
    smoothing: float = 0.1

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4", "gamma", "margin"):
            v = getattr(self, name)
            if not (0.0 <= v < float("inf")):
                raise ConfigError(f"{name} must be finite and nonnegative, got {v}")
        if not 0.0 <= self.smoothing < 1.0:
            raise ConfigError(f"smoothing must be in [0, 1), got {self.smoothing}")

    @property
    def lambdas(self) -> tuple[float, float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4)


class ClassifierHead(nn.Module):
    """BatchNorm neck then a bias-free linear classifier.

    ``forward`` returns ``(bn_feature, logits)``; the raw embedding stays with
    the caller for the triplet term.
    """

    def __init__(self, dim: int, num_classes: int, seed: int = 0):
        super().__init__()
        self.bn = nn.BatchNorm1d(dim)
        self.bn.bias.requires_grad_(False)
        self.fc = nn.Linear(dim, num_classes, bias=False)
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self.fc.weight.normal_(0.0, 0.001, generator=g)

    def forward(self, x: torch.Tensor):
        feat = self.bn(x)
        return feat, self.fc(feat)


def cross_entropy_label_smooth(logits: torch.Tensor, labels: torch.Tensor,
                               epsilon: float = 0.1) -> torch.Tensor:
    """Mean of ``-sum_k q_k log p_k`` with ``q = (1 - eps) onehot + eps / N``."""
    n = logits.shape[1]
    if not 0.0 <= epsilon < 1.0:
        raise ConfigError(f"epsilon must be in [0, 1), got {epsilon}")
    if labels.numel() and (labels.min() < 0 or labels.max() >= n):
        raise ValidationError(f"labels must lie in [0, {n}), got range "
                              f"[{int(labels.min())}, {int(labels.max())}]")
    log_p = F.log_softmax(logits, dim=1)
    q = torch.full_like(log_p, epsilon / n)
    q.scatter_add_(1, labels.view(-1, 1),
                   torch.full((labels.numel(), 1), 1.0 - epsilon, dtype=log_p.dtype))
    return -(q * log_p).sum(dim=1).mean()


def pairwise_euclidean(x: torch.Tensor) -> torch.Tensor:
    # direct differences keep the diagonal exactly zero; eps under sqrt keeps grads finite
    diff = x.unsqueeze(1) - x.unsqueeze(0)
    sq = (diff * diff).sum(-1)
    return torch.sqrt(sq.clamp_min(NORM_EPS))


def triplet_margin(embeddings: torch.Tensor, labels: torch.Tensor, margin: float = 0.3) -> torch.Tensor:
    """Batch-hard triplet loss: hinge(max d(a,p) - min d(a,n) + margin), averaged over anchors."""
    _, counts = torch.unique(labels, return_counts=True)
    if (counts < 2).any():
        raise ValidationError("every identity in the batch needs at least two images")
    if counts.numel() < 2:
        raise ValidationError("batch-hard mining needs at least two identities")
    dist = pairwise_euclidean(embeddings)
    same = labels.view(-1, 1) == labels.view(1, -1)
    hardest_pos = dist.masked_fill(~same, float("-inf")).max(dim=1).values
    hardest_neg = dist.masked_fill(same, float("inf")).min(dim=1).values
    return F.relu(hardest_pos - hardest_neg + margin).mean()


def _cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a * b).sum(-1) / ((a.norm(dim=-1) + NORM_EPS) * (b.norm(dim=-1) + NORM_EPS))


def separation_loss(f_g: torch.Tensor, *parts: torch.Tensor) -> torch.Tensor:
    """``sum_p (1 + cos(f_g, f_p))`` averaged over the batch.

    Called with ``(f_g, f_t, f_b)`` this lies in [0, 4].
    """
    if not parts:
        raise ValidationError("separation loss needs at least one part feature")
    for i, p in enumerate(parts):
        if p.shape != f_g.shape:
            raise ValidationError(f"part {i} shape {tuple(p.shape)} != global {tuple(f_g.shape)}")
    for name, t in (("f_g", f_g),) + tuple((f"part{i}", p) for i, p in enumerate(parts)):
        if (t.detach().norm(dim=-1) == 0).any():
            raise NumericError(f"{name} has a zero-norm row; cosine undefined")
    total = sum(1.0 + _cosine(f_g, p) for p in parts)
    return total.mean()


def aggregate(per_feature: Sequence[torch.Tensor | float], weights: LossWeights):
    """Weighted sum over (F_final, F_BB, f_g, f_c)."""
    if len(per_feature) != 4:
        raise ValidationError(f"expected 4 per-feature losses, got {len(per_feature)}")
    return sum(lam * loss for lam, loss in zip(weights.lambdas, per_feature))


def aggregate_id_tri(ce_losses, tri_losses, weights: LossWeights):
    return aggregate(ce_losses, weights), aggregate(tri_losses, weights)


def total_loss(l_id, l_tri, l_sl, gamma: float):
    return l_id + l_tri + gamma * l_sl
