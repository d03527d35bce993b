"""Relation Adaptive Module: per-dimension weights predicted from all features jointly."""
from __future__ import annotations

import torch
import torch.nn as nn

from .errors import NumericError, ValidationError

SLOT_NAMES = ("f_g", "f_t", "f_b", "f_c")


def concat_features(*features: torch.Tensor) -> torch.Tensor:
    """Fixed layout ``[f_g | part_0 | ... | part_{P-1} | f_c]``.

    With two parts this is ``[f_g | f_t | f_b | f_c]``.
    """
    if not features:
        raise ValidationError("nothing to concatenate")
    ref = features[0].shape
    names = SLOT_NAMES if len(features) == 4 else [f"slot{i}" for i in range(len(features))]
    for name, f in zip(names, features):
        if f.dim() != 2 or f.shape != ref:
            raise ValidationError(f"{name} has shape {tuple(f.shape)}, expected {tuple(ref)}")
    return torch.cat(features, dim=1)


def slot(concat: torch.Tensor, index: int, num_slots: int = 4) -> torch.Tensor:
    d = concat.shape[1] // num_slots
    return concat[:, index * d:(index + 1) * d]


class RelationAdaptive(nn.Module):
    """``sigmoid(W2 relu(W1 x + b1) + b2)`` over the whole concatenation."""

    def __init__(self, in_dim: int, hidden: int, seed: int = 0):
        super().__init__()
        self.in_dim = in_dim
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, in_dim)
        g = torch.Generator().manual_seed(seed)
        for layer in (self.fc1, self.fc2):
            bound = layer.in_features ** -0.5
            with torch.no_grad():
                layer.weight.uniform_(-bound, bound, generator=g)
                layer.bias.zero_()

    def forward(self, concat: torch.Tensor) -> torch.Tensor:
        return ram_weights(concat, self)


def ram_weights(concat: torch.Tensor, ram: RelationAdaptive) -> torch.Tensor:
    if concat.dim() != 2 or concat.shape[1] != ram.in_dim:
        raise ValidationError(f"RAM expects (batch, {ram.in_dim}), got {tuple(concat.shape)}")
    h = torch.relu(ram.fc1(concat))
    if not torch.isfinite(h).all():
        raise NumericError("non-finite activation after RAM layer 1")
    z = ram.fc2(h)
    if not torch.isfinite(z).all():
        raise NumericError("non-finite activation after RAM layer 2")
    return torch.sigmoid(z)


def correct(concat: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    if concat.shape != weights.shape:
        raise ValidationError(
            f"weights shape {tuple(weights.shape)} does not match features {tuple(concat.shape)}")
    return concat * weights
