"""Gossip matrices for worker graphs, their spectra, and consensus step-sizes.

A mixing matrix W is symmetric, doubly stochastic, and supported on the
communication graph (w_ij > 0 only between neighbours or on the diagonal).
Averaging with W contracts disagreement at a rate governed by the spectral
gap delta = 1 - |lambda_2(W)|; the closed-form consensus step-size gamma and
the derived contraction constant p = gamma * delta / 8 are what the
event-triggered engine consumes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_SYM_TOL = 1e-12
_STOCH_TOL = 1e-12
_EIG_TOL = 1e-9


@dataclass(frozen=True)
class MixingMatrix:
    """A validated gossip matrix together with its graph structure."""

    W: np.ndarray
    neighbors: tuple[tuple[int, ...], ...]  # sorted, excluding self
    name: str

    @property
    def n(self) -> int:
        return self.W.shape[0]

    def neighbor_weights(self, i: int) -> list[tuple[int, float]]:
        return [(j, float(self.W[i, j])) for j in self.neighbors[i]]


@dataclass(frozen=True)
class SpectralInfo:
    """Spectral summary of a mixing matrix.

    lambda2 is the second-largest eigenvalue magnitude, delta = 1 - lambda2
    the spectral gap, and beta = 1 - lambda_min = max_i (1 - lambda_i).
    connected is False when the averaging consensus cannot reach every node
    (delta == 0, e.g. the identity matrix or a graph with two components).
    """

    eigenvalues: np.ndarray  # descending
    lambda2: float
    delta: float
    beta: float
    connected: bool


@dataclass(frozen=True)
class ConsensusParams:
    """Consensus step-size gamma and contraction constant p = gamma*delta/8.

    gamma = 2*delta*omega / (64*delta + delta^2 + 16*beta^2
                             + 8*delta*beta^2 - 16*delta*omega)

    On the admissible domain (delta in (0,1], beta in (0,2], omega in (0,1])
    the denominator is at least 48*delta > 0 and at most 161, which gives the
    guarantees gamma <= omega, gamma >= 2*delta*omega/161 and
    p >= delta^2*omega/644.
    """

    gamma: float
    p: float
    delta: float
    beta: float
    omega: float


def _validate(W: np.ndarray, adjacency: list[set[int]], name: str) -> MixingMatrix:
    W = np.asarray(W, dtype=float)
    n = W.shape[0]
    if W.shape != (n, n):
        raise ValueError(f"mixing matrix must be square, got shape {W.shape}")
    if not np.all(np.abs(W - W.T) <= _SYM_TOL):
        raise ValueError("mixing matrix is not symmetric")
    ones = np.ones(n)
    if not np.all(np.abs(W @ ones - ones) <= _STOCH_TOL):
        raise ValueError("mixing matrix rows must sum to 1")
    if np.any(W < -_STOCH_TOL) or np.any(W > 1 + _STOCH_TOL):
        raise ValueError("mixing matrix entries must lie in [0, 1]")
    for i in range(n):
        for j in range(n):
            if i != j and j not in adjacency[i] and W[i, j] != 0.0:
                raise ValueError(f"nonzero weight w[{i},{j}] off the graph edges")
    neighbors = tuple(tuple(sorted(adjacency[i])) for i in range(n))
    return MixingMatrix(W=W, neighbors=neighbors, name=name)


def _metropolis(adjacency: list[set[int]]) -> np.ndarray:
    """Metropolis-Hastings weights: w_ij = 1/(1 + max(deg_i, deg_j))."""
    n = len(adjacency)
    deg = [len(a) for a in adjacency]
    W = np.zeros((n, n))
    for i in range(n):
        for j in adjacency[i]:
            W[i, j] = 1.0 / (1 + max(deg[i], deg[j]))
        W[i, i] = 1.0 - W[i].sum()
    return W


def build_ring(n: int, weighting: str = "uniform") -> MixingMatrix:
    """Ring of n >= 3 workers; each talks to its two cyclic neighbours.

    "uniform" puts weight 1/3 on self and both neighbours, which coincides
    with "metropolis" here since every degree is 2; both names are accepted.
    """
    if n < 3:
        raise ValueError(f"ring needs n >= 3, got n={n}")
    adjacency = [{(i - 1) % n, (i + 1) % n} for i in range(n)]
    if weighting == "uniform":
        W = np.zeros((n, n))
        for i in range(n):
            W[i, i] = W[i, (i - 1) % n] = W[i, (i + 1) % n] = 1.0 / 3.0
    elif weighting == "metropolis":
        W = _metropolis(adjacency)
    else:
        raise ValueError(f"unknown ring weighting {weighting!r}")
    return _validate(W, adjacency, f"ring{n}-{weighting}")


def build_complete(n: int) -> MixingMatrix:
    """Complete graph on n >= 2 workers with uniform weights 1/n."""
    if n < 2:
        raise ValueError(f"complete graph needs n >= 2, got n={n}")
    adjacency = [set(range(n)) - {i} for i in range(n)]
    W = np.full((n, n), 1.0 / n)
    return _validate(W, adjacency, f"complete{n}")


def build_custom(n: int, edges: list[tuple[int, int]], weighting: str = "metropolis") -> MixingMatrix:
    """Arbitrary undirected graph with Metropolis weights.

    edges are (i, j) pairs, 0-based; n=1 with no edges is the degenerate
    single-worker case (W = [[1]], trivially connected).
    """
    if n < 1:
        raise ValueError(f"need n >= 1, got n={n}")
    if weighting != "metropolis":
        raise ValueError("custom graphs support only metropolis weighting")
    adjacency: list[set[int]] = [set() for _ in range(n)]
    for i, j in edges:
        if not (0 <= i < n and 0 <= j < n) or i == j:
            raise ValueError(f"bad edge ({i}, {j}) for n={n}")
        adjacency[i].add(j)
        adjacency[j].add(i)
    return _validate(_metropolis(adjacency), adjacency, f"custom{n}")


def spectral_info(mixing: MixingMatrix | np.ndarray) -> SpectralInfo:
    W = mixing.W if isinstance(mixing, MixingMatrix) else np.asarray(mixing, dtype=float)
    eigs = np.linalg.eigvalsh(W)[::-1]  # descending
    if abs(eigs[0] - 1.0) > _EIG_TOL:
        raise ValueError(f"leading eigenvalue is {eigs[0]!r}, expected 1")
    lambda2 = float(np.max(np.abs(eigs[1:]))) if len(eigs) > 1 else 0.0
    delta = 1.0 - lambda2
    beta = float(np.max(1.0 - eigs))
    connected = delta > _EIG_TOL
    return SpectralInfo(
        eigenvalues=eigs,
        lambda2=lambda2,
        delta=delta,
        beta=beta,
        connected=connected,
    )


def consensus_params(info: SpectralInfo, omega: float) -> ConsensusParams:
    """Closed-form consensus step-size for a given compression quality omega."""
    if not info.connected or info.delta <= 0.0:
        raise ValueError(
            "mixing matrix is not connected (spectral gap delta = "
            f"{info.delta:.3g}); consensus averaging cannot mix and the "
            "step-size formula is undefined"
        )
    if not (0.0 < omega <= 1.0):
        raise ValueError(f"omega must be in (0, 1], got {omega}")
    d, b = info.delta, info.beta
    denom = 64.0 * d + d * d + 16.0 * b * b + 8.0 * d * b * b - 16.0 * d * omega
    gamma = 2.0 * d * omega / denom
    p = gamma * d / 8.0
    return ConsensusParams(gamma=gamma, p=p, delta=d, beta=b, omega=omega)
