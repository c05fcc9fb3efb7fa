"""Containers for sampled, projected encoder features."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch


@dataclass
class FeatureLayer:
    """Projected features of one encoder tap.

    ``features`` is ``(B, S, K)``; ``locations`` holds the ``S`` flat spatial
    indices (row-major over the tap's ``H x W``) they were sampled at.
    """

    name: str
    features: torch.Tensor
    locations: torch.Tensor
    spatial: tuple[int, int] = (0, 0)


@dataclass
class FeatureStack:
    layers: list[FeatureLayer] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def __getitem__(self, i) -> FeatureLayer:
        return self.layers[i]

    @property
    def names(self) -> list[str]:
        return [l.name for l in self.layers]
