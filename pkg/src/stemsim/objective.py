"""Loss mathematics: condition masks, masked distances, triplet and auxiliary losses.

Functions accept torch tensors (any leading batch shape, embedding on the
last axis) and participate in autograd; numpy arrays are converted.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
import torch

from .errors import ParameterError, ShapeError

DEFAULT_MARGIN = 0.2
DEFAULT_AUX_WEIGHT = 0.1  # lambda weighting the auxiliary term


def condition_mask(c: int, subspace_dim: int, n_conditions: int,
                   dtype=torch.float32) -> torch.Tensor:
    """Binary mask of length n_conditions * subspace_dim with ones on the
    contiguous block assigned to condition c."""
    if subspace_dim < 1:
        raise ParameterError(f"subspace_dim must be >= 1, got {subspace_dim}")
    if not (0 <= c < n_conditions):
        raise ParameterError(f"condition {c} out of range [0, {n_conditions})")
    mask = torch.zeros(n_conditions * subspace_dim, dtype=dtype)
    mask[c * subspace_dim:(c + 1) * subspace_dim] = 1
    return mask


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x))


def masked_distance(e_i, e_j, mask) -> torch.Tensor:
    """Euclidean distance between two embeddings restricted by a mask."""
    e_i, e_j, mask = _as_tensor(e_i), _as_tensor(e_j), _as_tensor(mask)
    if e_i.shape[-1] != e_j.shape[-1] or e_i.shape[-1] != mask.shape[-1]:
        raise ShapeError(
            f"embedding/mask widths differ: {e_i.shape[-1]}, {e_j.shape[-1]}, {mask.shape[-1]}")
    return torch.linalg.vector_norm((e_i - e_j) * mask, dim=-1)


def masked_triplet_loss(e_a, e_p, e_n, mask, margin: float = DEFAULT_MARGIN) -> torch.Tensor:
    """Hinge on the masked anchor-positive vs anchor-negative distance gap."""
    if margin < 0:
        raise ParameterError(f"margin must be >= 0, got {margin}")
    d_pos = masked_distance(e_a, e_p, mask)
    d_neg = masked_distance(e_a, e_n, mask)
    return torch.clamp(d_pos - d_neg + margin, min=0.0)


def plain_triplet_loss(e_a, e_p, e_n, margin: float = DEFAULT_MARGIN) -> torch.Tensor:
    """Triplet loss over the full embedding (all-ones mask)."""
    e_a = _as_tensor(e_a)
    mask = torch.ones(e_a.shape[-1], dtype=e_a.dtype)
    return masked_triplet_loss(e_a, e_p, e_n, mask, margin)


def concat_subspace_target(stem_embeddings: Mapping[int, np.ndarray],
                           n_conditions: int, subspace_dim: int) -> tuple[np.ndarray, bool]:
    """Concatenate per-instrument embeddings into a unit-norm target.

    `stem_embeddings` maps condition -> length-subspace_dim vector; absent
    conditions get a zero block. Returns (target, flagged); flagged marks a
    zero-norm target that must be excluded from the auxiliary batch term.
    """
    y = np.zeros(n_conditions * subspace_dim, dtype=np.float64)
    for c, vec in stem_embeddings.items():
        if vec is None:
            continue
        if not (0 <= c < n_conditions):
            raise ParameterError(f"condition {c} out of range [0, {n_conditions})")
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (subspace_dim,):
            raise ShapeError(f"stem embedding for condition {c} has shape {vec.shape}, "
                             f"expected ({subspace_dim},)")
        y[c * subspace_dim:(c + 1) * subspace_dim] = vec
    norm = np.linalg.norm(y)
    if norm == 0.0:
        return y, True
    return y / norm, False


def target_embedding(stem_mels: Mapping[int, object], g_models: Mapping[int, object],
                     n_conditions: int, subspace_dim: int) -> tuple[np.ndarray, bool]:
    """Encode present stem mels with their instrument networks and build the
    normalized concatenated target; absent conditions contribute zero blocks."""
    from .models import encode_instrument

    vectors = {}
    for c, mel in stem_mels.items():
        if mel is None:
            continue
        vectors[c] = encode_instrument(g_models[c], mel)
    return concat_subspace_target(vectors, n_conditions, subspace_dim)


def auxiliary_loss(f_x, target) -> torch.Tensor:
    """Euclidean distance between the main embedding and its target."""
    f_x, target = _as_tensor(f_x), _as_tensor(target)
    if f_x.shape[-1] != target.shape[-1]:
        raise ShapeError(f"embedding widths differ: {f_x.shape[-1]} vs {target.shape[-1]}")
    return torch.linalg.vector_norm(f_x - target.to(f_x.dtype), dim=-1)


@dataclass
class LossBreakdown:
    l_triplet: float
    l_aux: float
    aux_weight: float
    total: float

    def to_json(self) -> dict:
        return {"l_triplet": self.l_triplet, "l_aux": self.l_aux,
                "lambda": self.aux_weight, "total": self.total}


def combined_loss(l_triplet: float, l_aux: float,
                  aux_weight: float = DEFAULT_AUX_WEIGHT) -> LossBreakdown:
    """Scalar bookkeeping of total = triplet + weight * auxiliary."""
    if aux_weight < 0:
        raise ParameterError(f"aux weight must be >= 0, got {aux_weight}")
    l_triplet = float(l_triplet)
    l_aux = float(l_aux)
    return LossBreakdown(l_triplet=l_triplet, l_aux=l_aux, aux_weight=aux_weight,
                         total=l_triplet + aux_weight * l_aux)
