"""Training objective: cross-entropy plus the two superposition regularizers.

``total = ce + lambda_imp * importance + lambda_inter * interaction``

* importance: mean over real tokens of ``sqrt(P_i / E)`` where ``P`` is the
  polysemanticity of the masked embeddings (before positional encoding).
* interaction: attention-weighted ``(1 - I_ij)`` where ``I`` is the
  interference between rows of each head's attention matrix; normalized by
  ``M * T^2`` per example.

Batch values are means of per-example values, each example normalized by its
own length.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .metrics import EPS_NORM
from .vmask import mask_kl

SQRT_CLAMP = 1e-12


@dataclass
class LossBreakdown:
    l_ce: float
    l_importance: float
    l_interaction: float
    lambda_imp: float
    lambda_inter: float
    total: float
    l_vmask: float = 0.0
    vmask_info_coeff: float = 0.0

    def recombined(self) -> float:
        return (self.l_ce + self.lambda_imp * self.l_importance
                + self.lambda_inter * self.l_interaction
                + self.vmask_info_coeff * self.l_vmask)


def cross_entropy(logits: torch.Tensor, labels) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    if logits.dim() == 1:
        logits, labels = logits[None], labels.reshape(1)
    return F.cross_entropy(logits, labels)


def polysemanticity_torch(S: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
    """Differentiable polysemanticity for ``(..., T, D)`` inputs.

    Invalid rows must already be zero; they then neither score nor contribute.
    """
    norms = S.norm(dim=-1, keepdim=True)
    nonzero = norms >= EPS_NORM
    unit = torch.where(nonzero, S / torch.where(nonzero, norms, torch.ones_like(norms)),
                       torch.zeros_like(S))
    proj = unit @ S.transpose(-1, -2)
    T = S.shape[-2]
    off_diag = ~torch.eye(T, dtype=torch.bool)
    P = (proj.pow(2) * off_diag).sum(-1)
    if valid is not None:
        P = torch.where(valid, P, torch.zeros_like(P))
    return P


def importance_loss(S: torch.Tensor, E: int, valid: torch.Tensor | None = None) -> torch.Tensor:
    """Per-example ``mean_i sqrt(P_i / E)`` over the masked embeddings ``S``.

    ``S`` is ``(T, D)`` or ``(B, T, D)``; the result has the leading batch
    shape.
    """
    if valid is None:
        valid = torch.ones(S.shape[:-1], dtype=torch.bool)
    S = S * valid.unsqueeze(-1).to(S.dtype)
    P = polysemanticity_torch(S, valid)
    root = torch.sqrt(torch.clamp(P / E, min=SQRT_CLAMP))
    root = torch.where(valid, root, torch.zeros_like(root))
    return root.sum(-1) / valid.sum(-1).to(S.dtype)


def interaction_loss(A: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
    """``sum_heads sum_ij A_ij (1 - (A A^T)_ij) / T^2`` per example.

    ``A`` is ``(M, T, T)`` or ``(B, M, T, T)``. Rows and columns outside the
    valid prefix are ignored. The value lies in ``[0, M / T]``.
    """
    squeeze = A.dim() == 3
    if squeeze:
        A = A[None]
    if valid is None:
        valid = torch.ones(A.shape[0], A.shape[-1], dtype=torch.bool)
    pair = (valid[:, :, None] & valid[:, None, :])[:, None]
    A = torch.where(pair, A, torch.zeros_like(A))
    I = A @ A.transpose(-1, -2)
    per_head = (A * (1 - I)).sum((-1, -2))
    T = valid.sum(-1).to(A.dtype)
    out = per_head.sum(-1) / T.pow(2)
    return out[0] if squeeze else out


@dataclass
class LossTerms:
    """Tensor-valued terms (graph attached) plus their float summary."""

    total: torch.Tensor
    ce: torch.Tensor
    importance: torch.Tensor
    interaction: torch.Tensor
    vmask: torch.Tensor
    breakdown: LossBreakdown


def total_loss(trace, labels, lambda_imp: float = 0.0, lambda_inter: float = 0.0,
               vmask_info_coeff: float = 0.0) -> LossTerms:
    """Combine the loss terms for a :class:`~safr.model.BatchTrace`."""
    logits = trace.logits
    ce = cross_entropy(logits, labels)
    E = trace.vmask_out.shape[-1]
    M = trace.attn_weights.shape[1]

    def term(weight, fn):
        if weight:
            return fn()
        with torch.no_grad():
            return fn()

    imp = term(lambda_imp, lambda: importance_loss(trace.vmask_out, E, trace.valid).mean())
    inter = term(lambda_inter,
                 lambda: (interaction_loss(trace.attn_weights, trace.valid) / M).mean())
    if trace.mask_probs is not None:
        vm = term(vmask_info_coeff, lambda: mask_kl(trace.mask_probs, trace.valid).mean())
    else:
        vm = torch.zeros((), dtype=logits.dtype)
    total = ce
    for weight, value in ((lambda_imp, imp), (lambda_inter, inter), (vmask_info_coeff, vm)):
        if weight:
            total = total + weight * value
    bd = LossBreakdown(ce.item(), imp.item(), inter.item(), float(lambda_imp),
                       float(lambda_inter), total.item(), vm.item(), float(vmask_info_coeff))
    return LossTerms(total, ce, imp, inter, vm, bd)
