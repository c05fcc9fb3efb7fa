"""Fréchet distance with a pluggable embedder, output diversity, folder translation."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch

from .config import from_flat
from .errors import ConfigError, NumericalError
from .imagedata import list_images, load_test_image, save_png
from .networks import NetBundle, build_netbundle
from .training import load_checkpoint, load_params

log = logging.getLogger(__name__)

# relative tolerance for negative eigenvalues of near-singular covariances
EIG_CLAMP_RTOL = 1e-6
# results below this fraction of Tr(S_a) + Tr(S_b) are reported as 0
FD_ZERO_RTOL = float(np.sqrt(np.finfo(np.float64).eps))
# mean pairwise L1 (in [-1, 1] pixel units) below which outputs count as collapsed
COLLAPSE_THRESHOLD = 1e-2


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ValueError(f"covariance shape {self.cov.shape} does not match mean of size {self.mean.size}")


@dataclass
class Embedder:
    fn: Callable[[torch.Tensor], np.ndarray]
    name: str
    dim: int

    def __call__(self, img: torch.Tensor) -> np.ndarray:
        return np.asarray(self.fn(img), dtype=np.float64).reshape(-1)


def random_projection_embedder(dim: int = 64, pool: int = 16, seed: int = 0) -> Embedder:
    """Average-pool to ``pool x pool`` then apply a fixed Gaussian projection.

    A cheap, deterministic stand-in for an Inception embedding. Distances it
    produces are reported as "FD (custom embedder)", not FID.
    """
    gen = torch.Generator().manual_seed(seed)
    proj = torch.randn(3 * pool * pool, dim, generator=gen, dtype=torch.float64) / np.sqrt(3 * pool * pool)

    def fn(img):
        small = torch.nn.functional.adaptive_avg_pool2d(img.double()[None], pool)
        return (small.reshape(1, -1) @ proj).numpy()

    return Embedder(fn, f"randproj{dim}-pool{pool}-seed{seed}", dim)


def stats_from_embeddings(emb: np.ndarray) -> FeatureStats:
    emb = np.asarray(emb, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] < 2:
        raise ValueError(f"need at least 2 embeddings, got shape {emb.shape}")
    return FeatureStats(emb.mean(axis=0), np.cov(emb, rowvar=False, ddof=1), emb.shape[0])


def collect_stats(images: Iterable[torch.Tensor], emb: Embedder) -> FeatureStats:
    """Sample mean and unbiased covariance of the embeddings."""
    vecs = [emb(img) for img in images]
    if len(vecs) < 2:
        raise ValueError(f"need at least 2 images for covariance, got {len(vecs)}")
    return stats_from_embeddings(np.stack(vecs))


def _psd_sqrt(m: np.ndarray, scale: float) -> np.ndarray:
    m = (m + m.T) / 2
    vals, vecs = np.linalg.eigh(m)
    floor = -EIG_CLAMP_RTOL * max(scale, np.finfo(float).tiny)
    if vals.min() < floor:
        raise NumericalError(
            f"matrix is not positive semi-definite: min eigenvalue {vals.min():.3e}, "
            f"tolerance {floor:.3e}, condition estimate {np.abs(vals).max() / max(np.abs(vals).min(), 1e-300):.3e}"
        )
    vals = np.clip(vals, 0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace of the cross term is taken as Tr((A^(1/2) B A^(1/2))^(1/2)),
    which has the same eigenvalues as (AB)^(1/2) but stays symmetric, so an
    eigendecomposition suffices. It is averaged with the B-first ordering.
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"dimension mismatch: {a.mean.size} vs {b.mean.size}")
    scale = max(np.linalg.norm(a.cov, 2), np.linalg.norm(b.cov, 2))
    root_a = _psd_sqrt(a.cov, scale)
    root_b = _psd_sqrt(b.cov, scale)
    # both orderings have the same trace in exact arithmetic; averaging them
    # makes the estimate exactly symmetric even for rank-deficient inputs
    cross_ab = np.trace(_psd_sqrt(root_a @ b.cov @ root_a, scale * scale))
    cross_ba = np.trace(_psd_sqrt(root_b @ a.cov @ root_b, scale * scale))
    diff = a.mean - b.mean
    traces = float(np.trace(a.cov) + np.trace(b.cov))
    d = float(diff @ diff) + traces - float(cross_ab + cross_ba)
    # square roots of near-zero eigenvalues carry ~sqrt(eps) * |S| error each,
    # so anything below that is cancellation residue and reported as zero
    if d <= FD_ZERO_RTOL * traces:
        return 0.0
    return d


def diversity_score(outputs: Iterable[torch.Tensor]) -> float:
    """Mean pairwise mean-absolute pixel difference; ~0 means collapsed outputs."""
    outs = [torch.as_tensor(o, dtype=torch.float64) for o in outputs]
    if len(outs) < 2:
        raise ValueError("need at least 2 outputs")
    dists = [float((p - q).abs().mean()) for p, q in combinations(outs, 2)]
    return float(np.mean(dists))


DIRECTIONS = {"XtoY": "G", "X→Y": "G", "AtoB": "G", "YtoX": "F", "Y→X": "F", "BtoA": "F"}


@torch.no_grad()
def translate_folder(checkpoint, input_dir, direction: str, out_dir, crop_size: int = 256) -> list[tuple[str, str]]:
    """Translate every image in ``input_dir`` and write PNGs plus ``manifest.tsv``.

    ``checkpoint`` is a path or an already-built :class:`NetBundle`.
    """
    if direction not in DIRECTIONS:
        raise ConfigError(f"direction must be one of {sorted(DIRECTIONS)}, got {direction!r}")
    if isinstance(checkpoint, NetBundle):
        bundle = checkpoint
    else:
        state = load_checkpoint(checkpoint)
        cfg = from_flat(state["config"])
        bundle = build_netbundle(cfg.mode, cfg.ablation, cfg.net, cfg.nce.tap_layers())
        load_params(bundle, state["params"])
    net = getattr(bundle, DIRECTIONS[direction])
    if net is None:
        raise ConfigError(f"checkpoint has no generator for direction {direction} (single-direction run)")
    paths = list_images(input_dir)
    if not paths:
        log.warning("no images found in %s", input_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    net.eval()
    manifest = []
    for p in paths:
        img = load_test_image(p, crop_size)
        out = net(img[None])[0]
        dest = out_dir / (Path(p).stem + ".png")
        save_png(out, dest)
        manifest.append((p, str(dest)))
    (out_dir / "manifest.tsv").write_text("".join(f"{a}\t{b}\n" for a, b in manifest))
    return manifest


def load_folder(directory, size: int = 256) -> list[torch.Tensor]:
    return [load_test_image(p, size) for p in list_images(directory)]
