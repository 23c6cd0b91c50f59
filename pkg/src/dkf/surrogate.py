"""Synthetic high-channel count data for the d=2 benchmark.

A planar rotation-with-decay latent state drives many count channels whose
rates pass through a random smooth nonlinearity (softplus of random Fourier
features); counts come from the inverse Poisson CDF applied to the pinned
uniform stream, so the whole dataset is reproducible from one seed.
"""

from __future__ import annotations

import math

import numpy as np
import scipy.stats

from .statespace import (
    LinearGaussianDynamics,
    RandomSource,
    TrajectoryDataset,
    save_dataset,
    simulate_states,
    solve_stationary_covariance,
)

__all__ = ["surrogate_dynamics", "generate_surrogate", "write_surrogate"]

_DECAY = 0.96
_ANGLE = 0.15
_DRIVE = 0.05
_HIDDEN = 8
_FREQ = 1.2


def surrogate_dynamics() -> LinearGaussianDynamics:
    """Decaying rotation: A = 0.96 R(0.15 rad), Gamma = 0.05 I."""
    c, s = math.cos(_ANGLE), math.sin(_ANGLE)
    A = _DECAY * np.array([[c, -s], [s, c]])
    Gamma = _DRIVE * np.eye(2)
    return LinearGaussianDynamics(A, Gamma, solve_stationary_covariance(A, Gamma))


def generate_surrogate(T: int, m: int = 100, seed: int = 0) -> TrajectoryDataset:
    """Count observations of a d=2 state through a random smooth rate map.

    Channel rates are softplus(w_j . cos(V z + c) + b_j) with random Fourier
    features, parameters drawn once per seed; counts are Poisson via inverse
    CDF on uniforms.  The cosine features make the best linear decode of z
    from counts noticeably lossy while the map stays smooth and learnable.
    Streams: derive(1) for map parameters, derive(2) for states, derive(3)
    for counts.  split_index = T // 2.
    """
    if T < 4:
        raise ValueError("T must be at least 4")
    if m < 1:
        raise ValueError("m must be positive")
    base = RandomSource(seed)
    dyn = surrogate_dynamics()

    p_rng = base.derive(1)
    V = p_rng.normals(_HIDDEN * dyn.d).reshape(_HIDDEN, dyn.d) * _FREQ
    c = p_rng.normals(_HIDDEN) * 0.5
    W = p_rng.normals(m * _HIDDEN).reshape(m, _HIDDEN) * 1.2
    b = p_rng.normals(m) * 0.5 + 0.8

    z = simulate_states(dyn, T, base.derive(2))
    feats = np.cos(z @ V.T + c)
    rates = np.logaddexp(0.0, feats @ W.T + b)
    rates = np.maximum(rates, 1e-3)
    u = base.derive(3).uniforms(T * m).reshape(T, m)
    counts = scipy.stats.poisson.ppf(u, rates)
    return TrajectoryDataset(z, counts, split_index=T // 2)


def write_surrogate(path, T: int, m: int = 100, seed: int = 0) -> TrajectoryDataset:
    """Generate and save a surrogate dataset (CSV + sidecar); returns it."""
    ds = generate_surrogate(T, m, seed)
    save_dataset(ds, path, seed=seed)
    return ds
