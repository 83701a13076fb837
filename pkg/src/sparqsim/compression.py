"""Lossy compression operators for gossip messages.

Every operator C here satisfies the contraction property

    E ||x - C(x)||^2 <= (1 - omega) ||x||^2,   C(0) = 0,

for some omega in (0, 1].  Deterministic kinds satisfy it per input (for the
sign kinds with an input-dependent omega whose conservative floor is 1/d);
randomized kinds satisfy it in expectation over their own RNG stream.

The bit-cost model is abstract wire accounting, not a serialization: values
cost 32 bits, indices ceil(log2 d) bits, signs 1 bit, and every norm-carrying
message pays one 32-bit float.

Kinds and their omega:

    identity                 1
    top_k(k), rand_k(k)      k/d
    sign_l1                  ||x||_1^2 / (d ||x||_2^2), floor 1/d
    stochastic_quant(s)      1 - beta(d, s) with beta = min(d/s^2, sqrt(d)/s),
                             only a compression when beta < 1
    sign_top_k(k)            ||v||_1^2 / (d ||v||_2^2) with v = top_k(x), floor 1/d
    quant_top_k(k, s)        k / (d (1 + beta(k, s)))   [quantize the top-k part,
                             rescale by 1/(1+beta(k, s)) to stay a contraction]
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

KINDS = (
    "identity",
    "top_k",
    "rand_k",
    "sign_l1",
    "stochastic_quant",
    "sign_top_k",
    "quant_top_k",
)
RANDOMIZED_KINDS = ("rand_k", "stochastic_quant", "quant_top_k")
_K_KINDS = ("top_k", "rand_k", "sign_top_k", "quant_top_k")
_S_KINDS = ("stochastic_quant", "quant_top_k")

_VALUE_BITS = 32
_NORM_BITS = 32
_SIGN_BITS = 1


@dataclass(frozen=True, eq=False)
class CompressionOp:
    """Immutable descriptor of one operator; rng is the only mutable state."""

    kind: str
    k: int | None = None
    s: int | None = None
    rng: np.random.Generator | None = field(default=None, repr=False)

    def with_rng(self, rng: np.random.Generator) -> "CompressionOp":
        return CompressionOp(kind=self.kind, k=self.k, s=self.s, rng=rng)


@dataclass(frozen=True)
class OmegaCertificate:
    omega: float
    basis: str  # "closed-form" or "input-dependent-lower-bound"


def make_operator(
    kind: str,
    k: int | None = None,
    s: int | None = None,
    rng: np.random.Generator | None = None,
) -> CompressionOp:
    if kind not in KINDS:
        raise ValueError(f"unknown compression kind {kind!r}; choose from {KINDS}")
    if kind in _K_KINDS:
        if k is None or k < 1:
            raise ValueError(f"{kind} requires k >= 1, got {k}")
    elif k is not None:
        raise ValueError(f"{kind} takes no k parameter")
    if kind in _S_KINDS:
        if s is None or s < 1:
            raise ValueError(f"{kind} requires s >= 1, got {s}")
    elif s is not None:
        raise ValueError(f"{kind} takes no s parameter")
    return CompressionOp(kind=kind, k=k, s=s, rng=rng)


def _top_k_mask(x: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest |x_i|; ties broken toward the lowest index."""
    order = np.argsort(-np.abs(x), kind="stable")
    return order[:k]


def _quantize(x: np.ndarray, s: int, rng: np.random.Generator) -> np.ndarray:
    """Unbiased stochastic quantization onto levels {0, 1/s, ..., 1} * ||x||."""
    norm = float(np.linalg.norm(x))
    if norm == 0.0:
        return np.zeros_like(x)
    u = np.abs(x) / norm * s
    level = np.floor(u)
    frac = u - level
    level += (rng.random(x.shape[0]) < frac).astype(float)
    return norm * np.sign(x) * level / s


def beta_quant(d: int, s: int) -> float:
    """Variance factor of the stochastic quantizer: min(d/s^2, sqrt(d)/s)."""
    return min(d / s**2, math.sqrt(d) / s)


def compress(op: CompressionOp, x: np.ndarray) -> tuple[np.ndarray, int]:
    """Apply the operator; returns (compressed vector, wire bits)."""
    x = np.asarray(x, dtype=float)
    d = x.shape[0]
    if d < 1:
        raise ValueError("cannot compress an empty vector")
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite input to {op.kind} compression")
    if op.k is not None and op.k > d:
        raise ValueError(f"{op.kind} with k={op.k} on a length-{d} vector")

    bits = bit_cost_model(op, d)
    kind = op.kind
    if kind == "identity":
        return x.copy(), bits
    if kind == "top_k":
        y = np.zeros(d)
        idx = _top_k_mask(x, op.k)
        y[idx] = x[idx]
        return y, bits
    if kind == "rand_k":
        y = np.zeros(d)
        idx = op.rng.choice(d, size=op.k, replace=False)
        y[idx] = x[idx]
        return y, bits
    if kind == "sign_l1":
        return (np.abs(x).sum() / d) * np.sign(x), bits
    if kind == "stochastic_quant":
        return _quantize(x, op.s, op.rng), bits
    if kind == "sign_top_k":
        v = np.zeros(d)
        idx = _top_k_mask(x, op.k)
        v[idx] = x[idx]
        return (np.abs(v).sum() / op.k) * np.sign(v), bits
    if kind == "quant_top_k":
        v = np.zeros(d)
        idx = _top_k_mask(x, op.k)
        v[idx] = x[idx]
        return _quantize(v, op.s, op.rng) / (1.0 + beta_quant(op.k, op.s)), bits
    raise AssertionError(f"unhandled kind {kind}")


def omega_of(op: CompressionOp, d: int, x: np.ndarray | None = None) -> OmegaCertificate:
    """Contraction parameter omega for this operator at dimension d.

    For the sign kinds an input witness x sharpens omega to the
    input-dependent value; without one the conservative floor 1/d is used.
    """
    if d < 1:
        raise ValueError("dimension must be >= 1")
    kind = op.kind
    if kind == "identity":
        return OmegaCertificate(1.0, "closed-form")
    if kind in ("top_k", "rand_k"):
        return OmegaCertificate(min(op.k, d) / d, "closed-form")
    if kind == "stochastic_quant":
        beta = beta_quant(d, op.s)
        if beta >= 1.0:
            raise ValueError(
                f"stochastic_quant(s={op.s}) is not a compression operator at "
                f"d={d}: beta = min(d/s^2, sqrt(d)/s) = {beta:.4g} >= 1; increase s"
            )
        return OmegaCertificate(1.0 - beta, "closed-form")
    if kind == "quant_top_k":
        k = min(op.k, d)
        return OmegaCertificate(k / (d * (1.0 + beta_quant(k, op.s))), "closed-form")
    if kind == "sign_l1":
        if x is None:
            return OmegaCertificate(1.0 / d, "closed-form")
        x = np.asarray(x, dtype=float)
        n2 = float(x @ x)
        if n2 == 0.0:
            return OmegaCertificate(1.0 / d, "closed-form")
        return OmegaCertificate(
            max(1.0 / d, float(np.abs(x).sum() ** 2) / (d * n2)),
            "input-dependent-lower-bound",
        )
    if kind == "sign_top_k":
        if x is None:
            return OmegaCertificate(1.0 / d, "closed-form")
        x = np.asarray(x, dtype=float)
        idx = _top_k_mask(x, min(op.k, d))
        v = x[idx]
        n2 = float(v @ v)
        if n2 == 0.0:
            return OmegaCertificate(1.0 / d, "closed-form")
        return OmegaCertificate(
            max(1.0 / d, float(np.abs(v).sum() ** 2) / (d * n2)),
            "input-dependent-lower-bound",
        )
    raise AssertionError(f"unhandled kind {kind}")


def bit_cost_model(op: CompressionOp, d: int) -> int:
    """Wire bits for one compressed message of dimension d."""
    if d < 1:
        raise ValueError("dimension must be >= 1")
    idx_bits = math.ceil(math.log2(d))
    kind = op.kind
    if kind == "identity":
        return d * _VALUE_BITS
    if kind in ("top_k", "rand_k"):
        return op.k * (_VALUE_BITS + idx_bits)
    if kind == "sign_l1":
        return d * _SIGN_BITS + _NORM_BITS
    if kind == "stochastic_quant":
        return d * math.ceil(math.log2(2 * op.s + 1)) + _NORM_BITS
    if kind == "sign_top_k":
        return op.k * (_SIGN_BITS + idx_bits) + _NORM_BITS
    if kind == "quant_top_k":
        return op.k * (math.ceil(math.log2(2 * op.s + 1)) + idx_bits) + _NORM_BITS
    raise AssertionError(f"unhandled kind {kind}")


@dataclass(frozen=True)
class CertifyReport:
    kind: str
    d: int
    trials: int
    omega: float
    randomized: bool
    worst_ratio: float  # max over samples of ||x-C(x)||^2 / ||x||^2
    mean_ratio: float
    bound: float  # what the relevant statistic was compared against
    passed: bool

    def __str__(self) -> str:
        stat = "mean" if self.randomized else "worst"
        val = self.mean_ratio if self.randomized else self.worst_ratio
        verdict = "PASS" if self.passed else "FAIL"
        return (
            f"{verdict} {self.kind} d={self.d} trials={self.trials} "
            f"omega={self.omega:.6g} {stat}_ratio={val:.6g} bound={self.bound:.6g}"
        )


def certify_omega(op: CompressionOp, d: int, trials: int, rng_seed: int) -> CertifyReport:
    """Empirically check E||x - C(x)||^2 <= (1 - omega)||x||^2 on Gaussian inputs.

    Deterministic operators must satisfy the inequality on every sample
    (against the input-dependent omega when the kind has one); randomized
    operators are checked via the sample mean of the error ratio against
    (1 - omega) + 3 * SE.
    """
    if trials < 1000:
        raise ValueError(f"need trials >= 1000 for a meaningful certificate, got {trials}")
    from .seeding import stream

    sample_rng = stream(rng_seed, "certify", "samples", op.kind)
    op_rng = stream(rng_seed, "certify", "operator", op.kind)
    op = op.with_rng(op_rng)
    randomized = op.kind in RANDOMIZED_KINDS
    omega_nominal = omega_of(op, d).omega

    ratios = np.empty(trials)
    ok = True
    for t in range(trials):
        x = sample_rng.standard_normal(d)
        y, _ = compress(op, x)
        n2 = float(x @ x)
        err = x - y
        ratios[t] = float(err @ err) / n2
        if not randomized:
            omega_x = omega_of(op, d, x).omega
            if ratios[t] > (1.0 - omega_x) * (1.0 + 1e-12) + 1e-15:
                ok = False

    worst = float(ratios.max())
    mean = float(ratios.mean())
    if randomized:
        se = float(ratios.std(ddof=1)) / math.sqrt(trials)
        bound = (1.0 - omega_nominal) + 3.0 * se
        passed = mean <= bound
    else:
        bound = 1.0 - omega_nominal
        passed = ok
    return CertifyReport(
        kind=op.kind,
        d=d,
        trials=trials,
        omega=omega_nominal,
        randomized=randomized,
        worst_ratio=worst,
        mean_ratio=mean,
        bound=bound,
        passed=passed,
    )
