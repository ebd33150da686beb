"""Per-layer redundancy scores and the normalised cross-layer profile."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import List

import numpy as np

from .exceptions import ConfigError


def residual_mass(block):
    """Sum of ``D_ij`` over ordered pairs ``i != j``."""
    values = block.values if hasattr(block, "values") else np.asarray(block, dtype=float)
    return float(values.sum() - np.trace(values))


def mean_redundancy(block):
    values = block.values if hasattr(block, "values") else np.asarray(block, dtype=float)
    n = values.shape[0]
    if n < 2:
        raise ConfigError(f"mean redundancy needs at least two experts, got {n}")
    return residual_mass(values) / (n * (n - 1))


def normalize_profile(scores):
    """Min-max scale scores to [0, 1]. Equal scores all map to 0.5."""
    scores = [float(s) for s in scores]
    if not scores:
        raise ConfigError("normalize_profile needs at least one score")
    lo, hi = min(scores), max(scores)
    if hi == lo:
        return [0.5] * len(scores)
    span = hi - lo
    return [(s - lo) / span for s in scores]


@dataclass
class RedundancyProfile:
    mean_redundancy: List[float]
    residual_mass: List[float]
    normalized: List[float]

    @property
    def n_layers(self):
        return len(self.mean_redundancy)

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "mean_redundancy", "residual_mass", "normalized"])
        for l in range(self.n_layers):
            writer.writerow([l, repr(self.mean_redundancy[l]), repr(self.residual_mass[l]),
                             repr(self.normalized[l])])
        return buf.getvalue()


def build_profile(blocks):
    if not blocks:
        raise ConfigError("build_profile needs at least one block")
    means = [mean_redundancy(b) for b in blocks]
    masses = [residual_mass(b) for b in blocks]
    return RedundancyProfile(mean_redundancy=means, residual_mass=masses,
                             normalized=normalize_profile(means))
