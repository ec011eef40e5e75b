"""Scalar training objectives: adversarial generator/discriminator losses,
plain reconstruction, and InfoNCE for contrastive pretraining.

Every loss reduces with a mean over batch elements (and patch positions for
discriminator maps).  Probabilities are clamped before logs because the
adversarial losses are unbounded as the discriminator saturates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import torch

from .nets import ParamSet, discriminator_forward, predictor_forward

PROB_EPS = 1e-7
NORM_FLOOR = 1e-12


class NumericError(RuntimeError):
    """A loss or gradient left the finite, well-defined regime."""


@dataclass(frozen=True)
class LossConfig:
    """Objective weights: L1 trade-off lambda and contrastive temperature tau."""

    lambda_l1: float = 1000.0
    tau: float = 0.1

    def __post_init__(self):
        if self.lambda_l1 < 0:
            raise ValueError("lambda_l1 must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")


def _require_finite(name: str, *tensors: torch.Tensor) -> None:
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericError(f"{name}: non-finite input tensor")


def mean_log(prob: torch.Tensor) -> torch.Tensor:
    """Mean log-probability over all entries, clamped away from 0 and 1."""
    return torch.log(prob.clamp(PROB_EPS, 1.0 - PROB_EPS)).mean()


def reconstruction_loss(t_gen: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    if t_gen.shape != t.shape:
        raise ValueError(f"shape mismatch {tuple(t_gen.shape)} vs {tuple(t.shape)}")
    return (t_gen - t).abs().mean()


def generator_loss_from_map(d_gen: torch.Tensor, t_gen: torch.Tensor, t: torch.Tensor, lambda_l1: float) -> torch.Tensor:
    """Non-saturating adversarial term plus weighted mean absolute error."""
    return -mean_log(d_gen) + lambda_l1 * reconstruction_loss(t_gen, t)


def discriminator_loss_from_maps(d_gen: torch.Tensor, d_real: torch.Tensor) -> torch.Tensor:
    """Half the gap between log-realism of generated and real pairs."""
    return 0.5 * (mean_log(d_gen) - mean_log(d_real))


def generator_loss(
    t_gen: torch.Tensor,
    t: torch.Tensor,
    s: torch.Tensor,
    disc_params: ParamSet | Mapping[str, torch.Tensor],
    lambda_l1: float,
) -> torch.Tensor:
    _require_finite("generator_loss", t_gen, t, s)
    if lambda_l1 < 0:
        raise ValueError("lambda_l1 must be >= 0")
    return generator_loss_from_map(discriminator_forward(disc_params, s, t_gen), t_gen, t, lambda_l1)


def discriminator_loss(
    t_gen: torch.Tensor,
    t: torch.Tensor,
    s: torch.Tensor,
    disc_params: ParamSet | Mapping[str, torch.Tensor],
) -> torch.Tensor:
    _require_finite("discriminator_loss", t_gen, t, s)
    d_gen = discriminator_forward(disc_params, s, t_gen)
    d_real = discriminator_forward(disc_params, s, t)
    return discriminator_loss_from_maps(d_gen, d_real)


def _unit(x: torch.Tensor, what: str) -> torch.Tensor:
    norm = x.norm(dim=-1, keepdim=True)
    if (norm == 0).any():
        raise NumericError(f"info_nce: zero-norm {what} representation")
    return x / norm.clamp_min(NORM_FLOOR)


def info_nce(
    q_repr: torch.Tensor,
    k_plus: torch.Tensor,
    k_negs: torch.Tensor,
    predictor_params: Mapping[str, torch.Tensor] | None = None,
    tau: float = 0.1,
) -> torch.Tensor:
    """Contrastive loss over unit-normalized dot-product similarities.

    ``q_repr``/``k_plus`` are (B, D) (or a single (D,) pair), ``k_negs`` is
    (B, K, D) or a shared (K, D) bank with K >= 0.  The predictor, when given,
    transforms the query side only; keys never receive gradients.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    _require_finite("info_nce", q_repr, k_plus, k_negs)

    squeeze = q_repr.ndim == 1
    if squeeze:
        q_repr, k_plus = q_repr.unsqueeze(0), k_plus.unsqueeze(0)
    if q_repr.shape != k_plus.shape or q_repr.ndim != 2:
        raise ValueError("query and positive key must both be (B, D)")
    if k_negs.ndim == 2:
        k_negs = k_negs.unsqueeze(0).expand(q_repr.shape[0], *k_negs.shape)
    if k_negs.ndim != 3 or k_negs.shape[0] != q_repr.shape[0] or k_negs.shape[2] != q_repr.shape[1]:
        raise ValueError(f"negative keys must be (B, K, D), got {tuple(k_negs.shape)}")

    q = q_repr if predictor_params is None else predictor_forward(predictor_params, q_repr)
    q = _unit(q, "query")
    k_plus = _unit(k_plus.detach(), "positive key")
    pos = (q * k_plus).sum(dim=-1, keepdim=True)
    if k_negs.shape[1] > 0:
        k_negs = _unit(k_negs.detach(), "negative key")
        neg = torch.einsum("bd,bkd->bk", q, k_negs)
        logits = torch.cat([pos, neg], dim=1) / tau
    else:
        logits = pos / tau
    return torch.nn.functional.cross_entropy(logits, torch.zeros(logits.shape[0], dtype=torch.long))
