"""Survey coordinate displacement: forward sampler and observation likelihood.

Household-survey cluster coordinates are anonymized by offsetting each
point a random direction and distance before release. Urban clusters move
up to 2 km; rural clusters move up to 5 km except for a 1% subset allowed
up to 10 km. This module provides both sides of that mechanism:

- :func:`sample_displacement` / :func:`displace` draw offsets the way the
  publishing pipeline does (uniform distance within the cap), used by the
  synthetic world generator.
- :func:`likelihood` is the per-km^2 density of observing a reported
  coordinate at distance d from the true location, used to weight candidate
  locations when labels are spread over them.

The two are intentionally kept as independently specified pieces: the
published likelihood treats the offset as uniform over the disk, which is
not the radial density implied by a uniform distance draw. Candidate
weighting uses the likelihood as published.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .geo import GeoPoint, destination


class ClusterType(enum.Enum):
    """Survey cluster kind; determines the displacement cap."""

    URBAN = "urban"
    RURAL = "rural"


@dataclass(frozen=True)
class DisplacementModel:
    """Displacement caps and the rural far-displacement probability."""

    urban_max_km: float = 2.0
    rural_common_max_km: float = 5.0
    rural_rare_max_km: float = 10.0
    rural_rare_prob: float = 0.01

    def __post_init__(self) -> None:
        if not 0.0 < self.urban_max_km < self.rural_common_max_km < self.rural_rare_max_km:
            raise ValueError(
                "need 0 < urban_max_km < rural_common_max_km < rural_rare_max_km, got "
                f"{self.urban_max_km}, {self.rural_common_max_km}, {self.rural_rare_max_km}"
            )
        if not 0.0 <= self.rural_rare_prob <= 1.0:
            raise ValueError(f"rural_rare_prob {self.rural_rare_prob} outside [0, 1]")

    def max_radius_km(self, kind: ClusterType) -> float:
        """Largest displacement possible for the given cluster kind."""
        return self.urban_max_km if kind is ClusterType.URBAN else self.rural_rare_max_km


def likelihood(model: DisplacementModel, kind: ClusterType, d_km: float) -> float:
    """Density (per km^2) of the reported coordinate landing d_km from the
    true location.

    Piecewise constant: a uniform disk for urban, and a mixture of two
    uniform disks for rural. Boundary distances take the inner-piece value.
    """
    if d_km < 0:
        raise ValueError(f"distance must be non-negative, got {d_km}")
    if kind is ClusterType.URBAN:
        if d_km <= model.urban_max_km:
            return 1.0 / (math.pi * model.urban_max_km**2)
        return 0.0
    common = (1.0 - model.rural_rare_prob) / (math.pi * model.rural_common_max_km**2)
    rare = model.rural_rare_prob / (math.pi * model.rural_rare_max_km**2)
    if d_km <= model.rural_common_max_km:
        return common + rare
    if d_km <= model.rural_rare_max_km:
        return rare
    return 0.0


def sample_displacement(
    model: DisplacementModel, kind: ClusterType, rng: np.random.Generator
) -> tuple[float, float]:
    """Draw one (bearing, distance) offset.

    Bearing is uniform on [0, 2*pi). Urban distance is uniform on
    [0, urban_max]; rural distance is uniform on [0, common_max] with
    probability 1 - rare_prob, else uniform on [0, rare_max]. Draw order is
    fixed (bearing, branch, distance) so seeded streams reproduce exactly.
    """
    bearing = rng.uniform(0.0, 2.0 * math.pi)
    if kind is ClusterType.URBAN:
        distance = rng.uniform(0.0, model.urban_max_km)
    elif rng.random() < 1.0 - model.rural_rare_prob:
        distance = rng.uniform(0.0, model.rural_common_max_km)
    else:
        distance = rng.uniform(0.0, model.rural_rare_max_km)
    return bearing, distance


def displace(
    origin: GeoPoint, kind: ClusterType, model: DisplacementModel, rng: np.random.Generator
) -> GeoPoint:
    """Displace `origin` by one sampled offset; the result is always within
    the kind's maximum radius."""
    bearing, distance = sample_displacement(model, kind, rng)
    return destination(origin, bearing, distance)
