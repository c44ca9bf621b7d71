"""Variational word mask placed between the embedding lookup and positional encoding."""

from __future__ import annotations

import torch
import torch.nn as nn

PROB_CLAMP = 1e-6


def mask_probs(emb: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor,
               valid: torch.Tensor | None = None) -> torch.Tensor:
    """Per-token keep probability ``sigmoid(w . e_i + b)``; zero at padding."""
    p = torch.sigmoid(emb @ weight + bias)
    if valid is not None:
        p = torch.where(valid, p, torch.zeros_like(p))
    return p


def logistic_noise(shape, generator=None, dtype=torch.float32) -> torch.Tensor:
    """Logistic(0, 1) noise, i.e. the difference of two Gumbel(0, 1) draws."""
    tiny = torch.finfo(dtype).tiny
    u = torch.rand(shape, generator=generator, dtype=dtype).clamp(tiny, 1 - 2 ** -24)
    return torch.log(u) - torch.log1p(-u)


def sample_mask(probs: torch.Tensor, temperature: float, mode: str = "eval",
                generator=None, noise: torch.Tensor | None = None) -> torch.Tensor:
    """Binary-concrete relaxation of a Bernoulli(probs) mask.

    In eval mode the expected mask (``probs`` itself) is returned. ``noise``
    overrides the sampled logistic noise, mostly for tests.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if mode == "eval":
        return probs
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    p = probs.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    logit = torch.log(p) - torch.log1p(-p)
    if noise is None:
        noise = logistic_noise(p.shape, generator, p.dtype)
    return torch.sigmoid((logit + noise) / temperature)


def apply_mask(emb: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    return emb * z.unsqueeze(-1)


def mask_kl(probs: torch.Tensor, valid: torch.Tensor, prior: float = 0.5) -> torch.Tensor:
    """Per-example mean KL(Bernoulli(p) || Bernoulli(prior)) over valid tokens.

    Only used when the optional mask-information penalty is switched on.
    """
    p = probs.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    kl = p * torch.log(p / prior) + (1 - p) * torch.log((1 - p) / (1 - prior))
    kl = torch.where(valid, kl, torch.zeros_like(kl))
    return kl.sum(-1) / valid.sum(-1)


class VMask(nn.Module):
    def __init__(self, dim: int, temperature: float = 0.5):
        super().__init__()
        self.w = nn.Parameter(torch.zeros(dim))
        self.b = nn.Parameter(torch.zeros(()))
        self.temperature = temperature

    def forward(self, emb, valid, mode="eval", generator=None):
        p = mask_probs(emb, self.w, self.b, valid)
        z = sample_mask(p, self.temperature, mode, generator)
        z = torch.where(valid, z, torch.zeros_like(z))
        return apply_mask(emb, z), p, z
