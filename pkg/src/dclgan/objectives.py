"""Adversarial, identity, similarity and cycle terms, and their weighted sum."""

from __future__ import annotations

import math
from typing import Mapping

import torch
import torch.nn.functional as F

from .config import LossWeights
from .errors import ConfigError

LOSS_TERMS = ("gan_G", "gan_F", "d_X", "d_Y", "nce_X", "nce_Y", "idt", "sim", "cycle", "total_G")


def gan_loss(
    d_real: torch.Tensor | None,
    d_fake: torch.Tensor,
    role: str = "discriminator",
    variant: str = "hinge",
) -> torch.Tensor:
    """Adversarial loss on raw discriminator score maps.

    ``role="generator"`` ignores ``d_real``. Variants:

    * hinge: D = mean(relu(1 - real)) + mean(relu(1 + fake)); G = -mean(fake)
    * lsgan: D = mean((real - 1)^2) + mean(fake^2);           G = mean((fake - 1)^2)
    * log:   D = mean(softplus(-real)) + mean(softplus(fake)); G = mean(softplus(-fake))

    ``log`` is the sigmoid cross-entropy form, with the usual non-saturating
    generator objective.
    """
    if variant not in ("hinge", "lsgan", "log"):
        raise ConfigError(f"unknown GAN loss variant {variant!r}")
    if role == "generator":
        if variant == "hinge":
            return -d_fake.mean()
        if variant == "lsgan":
            return ((d_fake - 1) ** 2).mean()
        return F.softplus(-d_fake).mean()
    if role != "discriminator":
        raise ConfigError(f"role must be 'generator' or 'discriminator', got {role!r}")
    if variant == "hinge":
        return F.relu(1 - d_real).mean() + F.relu(1 + d_fake).mean()
    if variant == "lsgan":
        return ((d_real - 1) ** 2).mean() + (d_fake**2).mean()
    return F.softplus(-d_real).mean() + F.softplus(d_fake).mean()


def l1_mean(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a - b).abs().mean()


def identity_loss(G, F_, x: torch.Tensor | None, y: torch.Tensor) -> torch.Tensor:
    """mean|F(x) - x| + mean|G(y) - y|; the first term is skipped when ``F_`` is None."""
    loss = l1_mean(G(y), y)
    if F_ is not None and x is not None:
        loss = loss + l1_mean(F_(x), x)
    return loss


def identity_from_outputs(idt_x: torch.Tensor | None, x, idt_y: torch.Tensor, y) -> torch.Tensor:
    loss = l1_mean(idt_y, y)
    if idt_x is not None:
        loss = loss + l1_mean(idt_x, x)
    return loss


def cycle_loss(G, F_, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return l1_mean(F_(G(x)), x) + l1_mean(G(F_(y)), y)


def sum_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Sum of absolute differences over the last dim, averaged over any batch dims."""
    d = (a - b).abs().sum(-1)
    return d.mean() if d.dim() else d


def similarity_loss(
    real_x: torch.Tensor,
    fake_x: torch.Tensor,
    real_y: torch.Tensor,
    fake_y: torch.Tensor,
    light: Mapping[str, torch.nn.Module] | None = None,
) -> torch.Tensor:
    """Sum-L1 between light-network projections of real and fake features per domain.

    With ``light`` (keys ``H_xr, H_xf, H_yr, H_yf``) the inputs are patch
    feature sets and are projected first; without it they are taken to be the
    projected vectors already.
    """
    if light is not None:
        missing = {"H_xr", "H_xf", "H_yr", "H_yf"} - {k for k, v in light.items() if v is not None}
        if missing:
            raise ConfigError(f"similarity loss needs the four light networks; missing {sorted(missing)}")
        real_x, fake_x = light["H_xr"](real_x), light["H_xf"](fake_x)
        real_y, fake_y = light["H_yr"](real_y), light["H_yf"](fake_y)
    return sum_l1(real_x, fake_x) + sum_l1(real_y, fake_y)


def required_terms(mode: str, cycle: bool = False, single_direction: bool = False) -> list[str]:
    terms = ["gan_G", "nce_X", "idt"]
    if not single_direction:
        terms += ["gan_F", "nce_Y"]
    if mode == "SimDCL":
        terms.append("sim")
    if cycle:
        terms.append("cycle")
    return terms


def total_objective(
    parts: Mapping[str, torch.Tensor | float],
    w: LossWeights,
    mode: str = "DCL",
    cycle: bool = False,
    single_direction: bool = False,
):
    """Weighted generator-side objective.

    DCL:    l_gan (gan_G + gan_F) + l_nce nce_X + l_nce nce_Y + l_idt idt
    SimDCL: the above + l_sim sim;  cycle ablation: + l_cycle cycle.
    """
    missing = [t for t in required_terms(mode, cycle, single_direction) if parts.get(t) is None]
    if missing:
        raise ValueError(f"objective for mode {mode} is missing terms: {missing}")
    gan = parts["gan_G"] + (0.0 if single_direction else parts["gan_F"])
    nce = parts["nce_X"] + (0.0 if single_direction else parts["nce_Y"])
    total = w.lambda_gan * gan + w.lambda_nce * nce + w.lambda_idt * parts["idt"]
    if mode == "SimDCL":
        total = total + w.lambda_sim * parts["sim"]
    if cycle:
        total = total + w.lambda_cycle * parts["cycle"]
    return total


def check_finite(report: Mapping[str, float]) -> str | None:
    """Name of the first non-finite entry, or None."""
    for k, v in report.items():
        if v is not None and not math.isfinite(float(v)):
            return k
    return None
