"""Relaxed Heaviside projection with a doubling steepness schedule."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .elasticity import DomainMask


@dataclass(frozen=True)
class ProjectionConfig:
    threshold: float = 0.5
    steepness: float = 1.0
    doubling_period: int = 50
    steepness_cap: float = 64.0

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        if not self.steepness >= 1:
            raise ValueError(f"steepness must be >= 1, got {self.steepness}")
        if not self.steepness_cap >= 1:
            raise ValueError(f"steepness_cap must be >= 1, got {self.steepness_cap}")
        if self.doubling_period < 1:
            raise ValueError("doubling_period must be >= 1")


def heaviside(rho, cfg: ProjectionConfig):
    g, eta = cfg.steepness, cfg.threshold
    num = np.tanh(g * eta) + np.tanh(g * (np.asarray(rho) - eta))
    return num / (np.tanh(g * eta) + np.tanh(g * (1.0 - eta)))


def heaviside_derivative(rho, cfg: ProjectionConfig):
    g, eta = cfg.steepness, cfg.threshold
    # sech^2 without the cancellation of 1 - tanh^2 far from the threshold
    t = np.exp(-2.0 * np.abs(g * (np.asarray(rho, dtype=float) - eta)))
    sech2 = 4.0 * t / (1.0 + t) ** 2
    return g * sech2 / (np.tanh(g * eta) + np.tanh(g * (1.0 - eta)))


def advance_steepness(cfg: ProjectionConfig, iteration: int) -> ProjectionConfig:
    """Steepness ``min(cap, 2**(iteration // period))``; independent of ``cfg.steepness``."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    gamma = min(float(cfg.steepness_cap), 2.0 ** (iteration // cfg.doubling_period))
    return replace(cfg, steepness=gamma)


def volume_fraction(values, mask: DomainMask | None = None,
                    count_passive_solid: bool = False) -> float:
    """Material fraction of the design region.

    Passive void elements never count.  Passive solid elements are excluded
    unless ``count_passive_solid``, in which case they enter both sums as
    fully solid.
    """
    values = np.asarray(values, dtype=float)
    if mask is None:
        if values.size == 0:
            raise ValueError("no active elements")
        return float(values.sum() / values.size)
    if mask.states.shape != values.shape:
        raise ValueError("mask resolution does not match the density grid")
    design = mask.states == DomainMask.DESIGN
    n_design = int(design.sum())
    if n_design == 0:
        raise ValueError("no active elements")
    total = values[design].sum()
    count = n_design
    if count_passive_solid:
        n_solid = int((mask.states == DomainMask.SOLID).sum())
        total += n_solid
        count += n_solid
    return float(total / count)


def volume_gradient(mask: DomainMask | None, shape, count_passive_solid=False):
    """``dV/d rho~_e`` per element (zero on passive elements)."""
    nx, ny = shape
    if mask is None:
        return np.full((ny, nx), 1.0 / (nx * ny))
    design = mask.states == DomainMask.DESIGN
    count = int(design.sum())
    if count_passive_solid:
        count += int((mask.states == DomainMask.SOLID).sum())
    return np.where(design, 1.0 / count, 0.0)
