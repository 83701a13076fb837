"""Local objectives f_i and their stochastic gradient oracles.

Three families, all exposing the same duck-typed surface (local_loss,
local_grad, global_loss, global_grad, constants, f_star):

* QuadraticObjective: f_i(x) = 1/2 x'A_i x - b_i'x with additive Gaussian
  gradient noise of per-node std sigma_i.  L, mu, x*, f* are exact.
* LogisticObjective: binary l2-regularized logistic regression on a dataset
  split into per-node shards, either i.i.d. or sorted by label (the
  heterogeneous split).  mu = lam exactly, L = lam + max_j ||a_j||^2 / 4 is a
  safe upper bound; f* comes from a deterministic L-BFGS solve, cached.
* NonConvexObjective: sigmoid-squared regression, f_i(x) = mean_j
  (sigmoid(a_j'x) - y_j)^2 with realizable targets y_j = sigmoid(a_j'x_true),
  so f* = 0 exactly while the landscape is non-convex.

GradOracle owns one RNG stream per node (derived from the master seed) and
returns either exact gradients ("full" mode) or unbiased stochastic ones:
noise injection for quadratics, with-replacement minibatches for the data
objectives.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from .seeding import stream

# max |l''| for l(z) = (sigmoid(z) - y)^2, y in [0,1]:
# l'' = 2 s'(z)^2 + 2 (s(z)-y) s''(z), |s'| <= 1/4, |s''| <= 1/(6 sqrt 3).
_SIGMOID_SQ_CURV = 2.0 / 16.0 + 2.0 / (6.0 * np.sqrt(3.0))

_PROBE_POINTS = 64
_PROBE_RADIUS = 2.0


def _probe_G(obj, seed: int) -> float:
    """Estimate of the gradient second-moment bound G: max full-gradient norm
    over random probe points plus a noise allowance.  Reported, never enforced."""
    rng = stream(seed, "objective", "probe")
    worst = 0.0
    for _ in range(_PROBE_POINTS):
        x = _PROBE_RADIUS * rng.standard_normal(obj.d)
        for i in range(obj.n):
            worst = max(worst, float(np.linalg.norm(obj.local_grad(i, x))))
    return worst


@dataclass
class QuadraticObjective:
    A: np.ndarray  # (n, d, d), each symmetric PSD
    b: np.ndarray  # (n, d)
    noise_std: np.ndarray  # (n,)
    seed: int = 0
    kind: str = "quadratic"

    def __post_init__(self) -> None:
        self.A = np.asarray(self.A, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        self.noise_std = np.asarray(self.noise_std, dtype=float)
        n = self.A.shape[0]
        if self.A.shape[1] != self.A.shape[2]:
            raise ValueError("A_i blocks must be square")
        for i in range(n):
            if not np.allclose(self.A[i], self.A[i].T, atol=1e-12):
                raise ValueError(f"A_{i} is not symmetric")
        self._A_bar = self.A.mean(axis=0)
        self._b_bar = self.b.mean(axis=0)
        eigs = np.linalg.eigvalsh(self._A_bar)
        if eigs[0] < -1e-12:
            raise ValueError("global A is not PSD")
        self._mu = float(eigs[0])
        self._L = float(eigs[-1])
        self._x_star = np.linalg.solve(self._A_bar, self._b_bar)
        self._f_star = float(
            0.5 * self._x_star @ self._A_bar @ self._x_star - self._b_bar @ self._x_star
        )

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.A.shape[1]

    @property
    def x_star(self) -> np.ndarray:
        return self._x_star

    @property
    def f_star(self) -> float:
        return self._f_star

    def local_loss(self, i: int, x: np.ndarray) -> float:
        return float(0.5 * x @ self.A[i] @ x - self.b[i] @ x)

    def local_grad(self, i: int, x: np.ndarray) -> np.ndarray:
        return self.A[i] @ x - self.b[i]

    def global_loss(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self._A_bar @ x - self._b_bar @ x)

    def global_grad(self, x: np.ndarray) -> np.ndarray:
        return self._A_bar @ x - self._b_bar

    def constants(self) -> dict:
        sig_sq = float(np.mean(self.noise_std**2))
        return {
            "L": self._L,
            "mu": self._mu,
            "G_estimate": _probe_G(self, self.seed) + 3.0 * np.sqrt(sig_sq * self.d),
            "sigma_bar": float(np.sqrt(sig_sq)),
            "sigma_bar_sq": sig_sq,
        }


def make_quadratic(
    n: int,
    d: int,
    mu: float = 1.0,
    L: float = 10.0,
    noise_std: float = 0.5,
    heterogeneity: float = 0.0,
    seed: int = 0,
) -> QuadraticObjective:
    """Random quadratic with exact global curvature spectrum [mu, L].

    All nodes share the same A (eigenvalues linearly spaced between mu and L
    in a random orthogonal basis).  heterogeneity > 0 spreads the linear
    terms b_i around their mean with zero sum, so local optima differ while
    the global optimum x* (with ||x*|| ~ 1) is unchanged.
    """
    if not (0 < mu <= L):
        raise ValueError(f"need 0 < mu <= L, got mu={mu}, L={L}")
    rng = stream(seed, "objective", "quadratic")
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    eigs = np.linspace(mu, L, d) if d > 1 else np.array([L])
    A_shared = (q * eigs) @ q.T
    A_shared = 0.5 * (A_shared + A_shared.T)
    x_star = rng.standard_normal(d)
    x_star /= np.linalg.norm(x_star)
    b_shared = A_shared @ x_star
    b = np.tile(b_shared, (n, 1))
    if heterogeneity > 0.0:
        offsets = rng.standard_normal((n, d))
        offsets -= offsets.mean(axis=0, keepdims=True)
        b += heterogeneity * offsets
    return QuadraticObjective(
        A=np.tile(A_shared, (n, 1, 1)),
        b=b,
        noise_std=np.full(n, float(noise_std)),
        seed=seed,
    )


@dataclass
class LogisticObjective:
    features: np.ndarray  # (N, d)
    labels: np.ndarray  # (N,) in {0, 1}
    shards: tuple  # tuple of index arrays, one per node
    lam: float
    seed: int = 0
    kind: str = "logistic"
    _f_star_cache: Optional[float] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels)
        if set(np.unique(self.labels)) - {0, 1}:
            raise ValueError("labels must be binary 0/1")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        covered = np.sort(np.concatenate(self.shards))
        if not np.array_equal(covered, np.arange(len(self.labels))):
            raise ValueError("shards must partition the dataset")
        self._y_pm = 2.0 * self.labels - 1.0  # {-1, +1}

    @property
    def n(self) -> int:
        return len(self.shards)

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def _shard_loss(self, idx: np.ndarray, x: np.ndarray) -> float:
        z = self.features[idx] @ x
        return float(np.mean(np.logaddexp(0.0, -self._y_pm[idx] * z))) + 0.5 * self.lam * float(
            x @ x
        )

    def _shard_grad(self, idx: np.ndarray, x: np.ndarray) -> np.ndarray:
        a = self.features[idx]
        yz = self._y_pm[idx] * (a @ x)
        coef = -self._y_pm[idx] * expit(-yz)
        return (coef @ a) / len(idx) + self.lam * x

    def local_loss(self, i: int, x: np.ndarray) -> float:
        return self._shard_loss(self.shards[i], x)

    def local_grad(self, i: int, x: np.ndarray) -> np.ndarray:
        return self._shard_grad(self.shards[i], x)

    def _per_sample_grads(self, i: int, x: np.ndarray) -> np.ndarray:
        idx = self.shards[i]
        a = self.features[idx]
        yz = self._y_pm[idx] * (a @ x)
        coef = -self._y_pm[idx] * expit(-yz)
        return coef[:, None] * a + self.lam * x

    def global_loss(self, x: np.ndarray) -> float:
        return float(np.mean([self.local_loss(i, x) for i in range(self.n)]))

    def global_grad(self, x: np.ndarray) -> np.ndarray:
        return np.mean([self.local_grad(i, x) for i in range(self.n)], axis=0)

    @property
    def f_star(self) -> float:
        """Global minimum value via a deterministic L-BFGS solve (cached)."""
        if self._f_star_cache is None:
            res = minimize(
                self.global_loss,
                np.zeros(self.d),
                jac=self.global_grad,
                method="L-BFGS-B",
                options={"maxiter": 2000, "ftol": 1e-16, "gtol": 1e-12},
            )
            self._f_star_cache = float(res.fun)
        return self._f_star_cache

    def constants(self) -> dict:
        max_row_sq = float(np.max(np.einsum("ij,ij->i", self.features, self.features)))
        sigma = _probe_sigma(self, self.seed)
        return {
            "L": self.lam + max_row_sq / 4.0,
            "mu": self.lam,
            "G_estimate": _probe_G(self, self.seed),
            "sigma_bar": sigma,
            "sigma_bar_sq": sigma**2,
        }


def _probe_sigma(obj, seed: int, points: int = 8) -> float:
    """Estimated per-sample gradient std around the full gradient (reported only)."""
    rng = stream(seed, "objective", "probe-sigma")
    worst = 0.0
    for _ in range(points):
        x = rng.standard_normal(obj.d)
        for i in range(obj.n):
            full = obj.local_grad(i, x)
            per = obj._per_sample_grads(i, x)
            dev = float(np.mean(np.sum((per - full) ** 2, axis=1)))
            worst = max(worst, np.sqrt(dev))
    return float(worst)


def split_shards(n_samples: int, n_nodes: int, labels: np.ndarray, policy: str, seed: int):
    """Partition sample indices: "iid" shuffles, "label_sorted" gives each node
    a contiguous run of the label-sorted order (the heterogeneous split)."""
    if policy == "iid":
        perm = stream(seed, "objective", "shard").permutation(n_samples)
    elif policy == "label_sorted":
        perm = np.argsort(labels, kind="stable")
    else:
        raise ValueError(f"unknown shard policy {policy!r}")
    return tuple(np.sort(chunk) for chunk in np.array_split(perm, n_nodes))


def make_logistic(
    n: int,
    d: int,
    samples_per_node: int = 50,
    lam: float = 0.01,
    separation: float = 2.0,
    shard: str = "iid",
    seed: int = 0,
) -> LogisticObjective:
    """Two Gaussian blobs at +/- separation/2 along a random direction."""
    rng = stream(seed, "objective", "logistic")
    N = n * samples_per_node
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    labels = (np.arange(N) % 2).astype(np.int64)
    centers = np.where(labels[:, None] == 1, 0.5 * separation, -0.5 * separation) * direction
    features = centers + rng.standard_normal((N, d))
    shards = split_shards(N, n, labels, shard, seed)
    return LogisticObjective(features=features, labels=labels, shards=shards, lam=lam, seed=seed)


def load_csv_dataset(path: str) -> tuple[np.ndarray, np.ndarray]:
    """Load a dataset from CSV: feature columns followed by an integer label."""
    raw = np.loadtxt(path, delimiter=",", ndmin=2)
    return raw[:, :-1], raw[:, -1].astype(np.int64)


def make_logistic_from_data(
    features: np.ndarray,
    labels: np.ndarray,
    n: int,
    lam: float = 0.01,
    shard: str = "iid",
    seed: int = 0,
) -> LogisticObjective:
    shards = split_shards(len(labels), n, np.asarray(labels), shard, seed)
    return LogisticObjective(
        features=features, labels=np.asarray(labels), shards=shards, lam=lam, seed=seed
    )


@dataclass
class NonConvexObjective:
    feats: np.ndarray  # (n, m, d)
    targets: np.ndarray  # (n, m) in (0, 1)
    x_true: np.ndarray
    seed: int = 0
    kind: str = "nonconvex"

    @property
    def n(self) -> int:
        return self.feats.shape[0]

    @property
    def d(self) -> int:
        return self.feats.shape[2]

    @property
    def f_star(self) -> float:
        # targets are realizable by construction: f_i(x_true) = 0 for every i
        return 0.0

    def local_loss(self, i: int, x: np.ndarray) -> float:
        r = expit(self.feats[i] @ x) - self.targets[i]
        return float(np.mean(r * r))

    def local_grad(self, i: int, x: np.ndarray) -> np.ndarray:
        s = expit(self.feats[i] @ x)
        coef = 2.0 * (s - self.targets[i]) * s * (1.0 - s)
        return (coef @ self.feats[i]) / self.feats.shape[1]

    def _per_sample_grads(self, i: int, x: np.ndarray) -> np.ndarray:
        a = self.feats[i]
        s = expit(a @ x)
        coef = 2.0 * (s - self.targets[i]) * s * (1.0 - s)
        return coef[:, None] * a

    def global_loss(self, x: np.ndarray) -> float:
        return float(np.mean([self.local_loss(i, x) for i in range(self.n)]))

    def global_grad(self, x: np.ndarray) -> np.ndarray:
        return np.mean([self.local_grad(i, x) for i in range(self.n)], axis=0)

    def constants(self) -> dict:
        max_row_sq = float(np.max(np.einsum("nmd,nmd->nm", self.feats, self.feats)))
        sigma = _probe_sigma(self, self.seed)
        return {
            "L": _SIGMOID_SQ_CURV * max_row_sq,
            "mu": 0.0,
            "G_estimate": _probe_G(self, self.seed),
            "sigma_bar": sigma,
            "sigma_bar_sq": sigma**2,
        }


def make_nonconvex(
    n: int,
    d: int,
    samples_per_node: int = 40,
    feature_scale: float = 0.6,
    x_true_scale: float = 3.0,
    seed: int = 0,
) -> NonConvexObjective:
    """Sigmoid-squared regression with realizable targets (so f* = 0).

    feature_scale controls the effective curvature (smaller rows = flatter,
    slower landscape); x_true_scale controls how saturated the targets are.
    """
    rng = stream(seed, "objective", "nonconvex")
    # rows have expected norm ~ feature_scale, which sets the curvature scale
    feats = feature_scale / np.sqrt(d) * rng.standard_normal((n, samples_per_node, d))
    x_true = rng.standard_normal(d)
    x_true *= x_true_scale / np.linalg.norm(x_true)
    targets = expit(np.einsum("nmd,d->nm", feats, x_true))
    return NonConvexObjective(feats=feats, targets=targets, x_true=x_true, seed=seed)


class GradOracle:
    """Per-node stochastic gradient oracle with independent derived streams.

    mode "full" returns exact local gradients and consumes no randomness;
    mode "stochastic" adds Gaussian noise (quadratics) or draws a
    with-replacement minibatch of size m (data objectives).
    """

    def __init__(self, objective, seed: int, mode: str = "stochastic", minibatch: int = 8):
        if mode not in ("full", "stochastic"):
            raise ValueError(f"unknown oracle mode {mode!r}")
        self.objective = objective
        self.mode = mode
        self.minibatch = int(minibatch)
        self.streams = [stream(seed, "grad", i) for i in range(objective.n)]

    def grad(self, node: int, x: np.ndarray) -> np.ndarray:
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite iterate passed to gradient oracle (node {node})")
        obj = self.objective
        if self.mode == "full":
            return obj.local_grad(node, x)
        if obj.kind == "quadratic":
            g = obj.local_grad(node, x)
            sigma = obj.noise_std[node]
            if sigma > 0:
                g = g + sigma * self.streams[node].standard_normal(obj.d)
            return g
        if obj.kind == "logistic":
            shard = obj.shards[node]
            pick = self.streams[node].integers(0, len(shard), size=self.minibatch)
            return obj._shard_grad(shard[pick], x)
        if obj.kind == "nonconvex":
            m = obj.feats.shape[1]
            pick = self.streams[node].integers(0, m, size=self.minibatch)
            a = obj.feats[node, pick]
            s = expit(a @ x)
            coef = 2.0 * (s - obj.targets[node, pick]) * s * (1.0 - s)
            return (coef @ a) / self.minibatch
        raise ValueError(f"oracle does not know objective kind {obj.kind!r}")
