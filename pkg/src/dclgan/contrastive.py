"""InfoNCE and the multi-layer, patch-wise NCE loss built on it."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import NumericalError
from .features import FeatureLayer, FeatureStack
from .networks import encoder_features, sample_features


def _check_norms(*tensors: torch.Tensor) -> None:
    for t in tensors:
        if t.numel() and bool((t.detach().norm(dim=-1) == 0).any()):
            raise NumericalError("zero-norm vector passed to InfoNCE; cosine similarity is undefined")


def infonce(
    query: torch.Tensor,
    positive: torch.Tensor,
    negatives: torch.Tensor,
    temperature: float = 0.07,
) -> torch.Tensor:
    """Cross-entropy of picking ``positive`` over ``negatives`` for ``query``.

    Shapes: ``query`` and ``positive`` are ``(..., K)``, ``negatives`` is
    ``(..., N, K)``. Similarities are cosine; the softmax is evaluated through
    ``logsumexp`` so extreme similarities at small temperatures stay finite.
    Returns the loss per leading index (a scalar for unbatched input).
    """
    if not temperature > 0:
        raise NumericalError(f"temperature must be > 0, got {temperature}")
    if negatives.shape[-2] < 1:
        raise ValueError("need at least one negative")
    _check_norms(query, positive, negatives)
    q = F.normalize(query, dim=-1)
    pos = (q * F.normalize(positive, dim=-1)).sum(-1, keepdim=True)
    neg = torch.einsum("...k,...nk->...n", q, F.normalize(negatives, dim=-1))
    logits = torch.cat([pos, neg], dim=-1) / temperature
    return torch.logsumexp(logits, dim=-1) - logits[..., 0]


def _check_pairing(q: FeatureLayer, k: FeatureLayer) -> None:
    if q.name != k.name:
        raise ValueError(f"layer mismatch: query {q.name!r} vs key {k.name!r}")
    if q.locations.shape != k.locations.shape or not torch.equal(q.locations.cpu(), k.locations.cpu()):
        raise ValueError(f"layer {q.name!r}: query and key were sampled at different locations")
    if q.features.shape != k.features.shape:
        raise ValueError(
            f"layer {q.name!r}: feature shapes differ {tuple(q.features.shape)} vs {tuple(k.features.shape)}"
        )


def nce_logits(
    query: torch.Tensor,
    key: torch.Tensor,
    temperature: float = 0.07,
    extra_negatives: torch.Tensor | None = None,
) -> torch.Tensor:
    """Temperature-scaled cosine logits, ``(B, S, S + M)``.

    Column ``s`` of row ``s`` is the positive; the remaining ``S - 1`` key
    columns and the ``M`` rows of ``extra_negatives`` are negatives.
    """
    if not temperature > 0:
        raise NumericalError(f"temperature must be > 0, got {temperature}")
    _check_norms(query, key)
    q = F.normalize(query, dim=-1)
    logits = torch.bmm(q, F.normalize(key, dim=-1).transpose(1, 2))
    if extra_negatives is not None:
        _check_norms(extra_negatives)
        e = F.normalize(extra_negatives, dim=-1)
        logits = torch.cat([logits, torch.bmm(q, e.transpose(1, 2))], dim=2)
    return logits / temperature


def patchnce_layer(
    query: torch.Tensor,
    key: torch.Tensor,
    temperature: float = 0.07,
    extra_negatives: torch.Tensor | None = None,
) -> torch.Tensor:
    """Per-location InfoNCE over one layer, ``(B, S)`` losses; see :func:`nce_logits`."""
    logits = nce_logits(query, key, temperature, extra_negatives)
    b, s, _ = logits.shape
    target = torch.arange(s, device=logits.device).expand(b, s)
    return F.cross_entropy(logits.reshape(b * s, -1), target.reshape(-1), reduction="none").view(b, s)


def patchnce_direction(
    query_stack: FeatureStack,
    key_stack: FeatureStack,
    temperature: float = 0.07,
    external: FeatureStack | None = None,
) -> torch.Tensor:
    """Sum over layers of the mean per-location InfoNCE.

    ``query_stack`` embeds the generated image, ``key_stack`` the source
    image; both must carry identical layer names and sampled locations.
    ``external`` supplies extra negatives per layer (matched by name).
    """
    if len(query_stack) != len(key_stack):
        raise ValueError(f"stack depth mismatch: {len(query_stack)} vs {len(key_stack)}")
    if external is not None and external.names != key_stack.names:
        raise ValueError("external negatives must have the same layers as the key stack")
    total = 0.0
    for i, (q, k) in enumerate(zip(query_stack, key_stack)):
        _check_pairing(q, k)
        extra = external[i].features if external is not None else None
        total = total + patchnce_layer(q.features, k.features, temperature, extra).mean()
    return total


@dataclass
class PatchNCEResult:
    loss_x: torch.Tensor
    loss_y: torch.Tensor | None
    # emb_X(x), emb_Y(G(x)), emb_Y(y), emb_X(F(y)); the last two absent without F
    real_x: FeatureStack
    fake_y: FeatureStack
    real_y: FeatureStack | None = None
    fake_x: FeatureStack | None = None


def patchnce_pair(
    x: torch.Tensor,
    y: torch.Tensor,
    bundle,
    temperature: float = 0.07,
    num_patches: int = 256,
    external_negatives: bool = False,
    fake_y: torch.Tensor | None = None,
    fake_x: torch.Tensor | None = None,
    taps_x: dict | None = None,
    taps_y: dict | None = None,
    generator: torch.Generator | None = None,
) -> PatchNCEResult:
    """PatchNCE in both translation directions.

    X->Y: keys come from ``(G_enc, H_X)`` on ``x``, queries from
    ``(F_enc, H_Y)`` on ``G(x)`` at the same locations; Y->X mirrors it.
    Precomputed translations and their encoder taps (from the generator's
    own forward pass) may be passed in to avoid recomputation.
    Under ``external_negatives`` each query additionally contrasts against
    the other same-domain stack of the iteration.
    """
    layers = bundle.layers
    enc_x, head_x = bundle.embedding_X()
    enc_y, head_y = bundle.embedding_Y()
    if fake_y is None or taps_x is None:
        fake_y, taps_x = bundle.G(x, layers)
    real_x = sample_features(taps_x, head_x, layers, num_patches, generator=generator)
    q_y = encoder_features(enc_y, head_y, fake_y, layers, num_patches, [l.locations for l in real_x])
    if bundle.F is None:
        if external_negatives:
            raise ValueError("external negatives need both translation directions")
        return PatchNCEResult(patchnce_direction(q_y, real_x, temperature), None, real_x, q_y)

    if fake_x is None or taps_y is None:
        fake_x, taps_y = bundle.F(y, layers)
    real_y = sample_features(taps_y, head_y, layers, num_patches, generator=generator)
    q_x = encoder_features(enc_x, head_x, fake_x, layers, num_patches, [l.locations for l in real_y])
    loss_x = patchnce_direction(q_y, real_x, temperature, external=q_x if external_negatives else None)
    loss_y = patchnce_direction(q_x, real_y, temperature, external=q_y if external_negatives else None)
    return PatchNCEResult(loss_x, loss_y, real_x, q_y, real_y, q_x)
