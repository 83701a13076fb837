"""Run logging, offline audits, and experiment orchestration.

A RunLog is the full per-iteration record of one run (one row per iteration,
columns fixed by sparq_core.COLUMNS) plus a summary and the constants the
run was configured with.  CSV output is deterministic byte-for-byte given
the same config and seed: floats are written with repr (shortest round-trip
form) and wall-clock time lives only in the JSON sidecar.

audit() replays the recorded per-round states of a finished run and checks,
offline and independently of the engine loop:

* trigger bound: every silent node really was below its threshold,
* average preservation: the consensus step never moved the mean,
* replica consistency: every node's copy of every estimate is bit-identical
  to the owner's,
* the deviation bound: [sum_j ||xbar - x_j||^2 + sum_j ||x_j - xhat_j||^2]
  / eta_t^2 at each sync index stays under 20 A_t / p^2 for decaying step
  sizes (A_t = 2nG^2H^2 + (p/2)(8nG^2H^2/omega + 5 omega n c_t / 4)) or
  under 4 A / p^2 for fixed ones (with c_t replaced by eta^-(1-eps)),
  using the measured max gradient norm as G.

compare_bits_to_accuracy finds the first crossing of an optimality-gap
target on the cumulative-bits axis, and rate_fit estimates the tail decay
exponent of a positive series on a log-log scale.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .sparq_core import COLUMNS

_INT_COLS = {"t", "nodes_triggered", "bits_round", "bits_cumulative"}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    return obj


@dataclass
class RunLog:
    """Per-iteration metrics plus run summary and configured constants."""

    data: np.ndarray  # (T, len(COLUMNS)) float64
    summary: dict
    constants: dict
    config: dict | None = None

    columns = COLUMNS

    def column(self, name: str) -> np.ndarray:
        return self.data[:, COLUMNS.index(name)]

    def __len__(self) -> int:
        return self.data.shape[0]

    def to_csv(self, f) -> None:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(COLUMNS)
        for row in self.data:
            writer.writerow(
                [
                    str(int(v)) if col in _INT_COLS else repr(float(v))
                    for col, v in zip(COLUMNS, row)
                ]
            )

    def csv_bytes(self) -> bytes:
        buf = io.StringIO()
        self.to_csv(buf)
        return buf.getvalue().encode()

    def sidecar(self, audit_report: "AuditReport | None" = None) -> dict:
        return _jsonable(
            {
                "summary": self.summary,
                "constants": self.constants,
                "config": self.config,
                "audit": audit_report.to_dict() if audit_report is not None else None,
            }
        )

    @classmethod
    def read_csv(cls, path) -> "RunLog":
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader)
            if tuple(header) != COLUMNS:
                raise ValueError(f"unexpected CSV header {header}")
            rows = [[float(v) for v in row] for row in reader]
        return cls(data=np.array(rows, dtype=float).reshape(len(rows), len(COLUMNS)),
                   summary={}, constants={})


@dataclass
class CheckResult:
    name: str
    applicable: bool
    passed: bool
    detail: str = ""
    first_violation: tuple | None = None
    worst: float | None = None

    def line(self) -> str:
        if not self.applicable:
            return f"SKIP {self.name}: {self.detail}"
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


@dataclass
class AuditReport:
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks if c.applicable)

    def check(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "checks": [
                {
                    "name": c.name,
                    "applicable": c.applicable,
                    "passed": c.passed,
                    "detail": c.detail,
                    "first_violation": list(c.first_violation) if c.first_violation else None,
                    "worst": c.worst,
                }
                for c in self.checks
            ],
        }

    def __str__(self) -> str:
        return "\n".join(c.line() for c in self.checks)


def audit(
    states: dict[str, np.ndarray],
    constants: dict,
    measured_G: float | None = None,
    avg_tol: float = 1e-9,
) -> AuditReport:
    """Offline invariant checks against recorded per-round states.

    states comes from the engine's recorder (or states.npz on disk);
    constants is the RunLog constants dict; measured_G defaults to the
    summary value stored alongside (the max observed gradient norm).
    """
    report = AuditReport()
    rounds = len(states["t"])
    if rounds == 0:
        report.checks.append(
            CheckResult("trigger_bound", False, True, "no synchronization rounds recorded")
        )
        return report

    t_arr = states["t"]
    eta = states["eta"]
    c_arr = states["c"]
    x_half = states["x_half"]
    xhat_pre = states["xhat_pre"]
    xhat_post = states["xhat_post"]
    x_post = states["x_post"]
    triggered = states["triggered"].astype(bool)
    n = x_half.shape[1]

    # --- trigger bound: silent nodes must sit below c_t eta_t^2 ---
    always = bool(constants.get("always_trigger"))
    if always:
        report.checks.append(
            CheckResult("trigger_bound", False, True, "always_trigger bypasses the check")
        )
    else:
        first = None
        worst = 0.0
        drift = ((x_half - xhat_pre) ** 2).sum(axis=2)  # (rounds, n)
        for r in range(rounds):
            thr = c_arr[r] * eta[r] * eta[r]
            for i in range(n):
                if triggered[r, i]:
                    continue
                worst = max(worst, drift[r, i] - thr)
                if drift[r, i] > thr * (1 + 1e-12) + 1e-15 and first is None:
                    first = (int(t_arr[r]), i)
        report.checks.append(
            CheckResult(
                "trigger_bound",
                True,
                first is None,
                f"silent-node drift minus threshold peaks at {worst:.3g}"
                + (f"; first violation at t={first[0]}, node {first[1]}" if first else ""),
                first_violation=first,
                worst=float(worst),
            )
        )

    # --- average preservation across the consensus step ---
    mean_shift = np.abs(x_post.mean(axis=1) - x_half.mean(axis=1)).max(axis=1)
    bad = np.nonzero(mean_shift > avg_tol)[0]
    first = (int(t_arr[bad[0]]),) if len(bad) else None
    report.checks.append(
        CheckResult(
            "average_preservation",
            True,
            first is None,
            f"max |mean(x+) - mean(x_half)| = {float(mean_shift.max()):.3g} (tol {avg_tol:g})"
            + (f"; first violation at t={first[0]}" if first else ""),
            first_violation=first,
            worst=float(mean_shift.max()),
        )
    )

    # --- replica consistency (bit-for-bit) ---
    pair_index = states["pair_index"]
    replicas_post = states["replicas_post"]
    owners_view = xhat_post[:, pair_index[:, 1], :]  # what the owner holds
    mismatch = ~np.all(replicas_post == owners_view, axis=2)  # (rounds, P)
    first = None
    if mismatch.any():
        r, pidx = np.argwhere(mismatch)[0]
        first = (int(t_arr[r]), int(pair_index[pidx, 0]), int(pair_index[pidx, 1]))
    report.checks.append(
        CheckResult(
            "replica_consistency",
            True,
            first is None,
            "all replicas bit-identical to owners"
            if first is None
            else f"node {first[1]}'s copy of {first[2]} differs at t={first[0]}",
            first_violation=first,
        )
    )

    # --- deviation bound at sync indices ---
    p = constants.get("p")
    omega = constants.get("omega")
    H = constants.get("H")
    lr_kind = constants.get("lr_kind")
    G = measured_G if measured_G is not None else constants.get("G_estimate")
    if p is None or omega in (None, 0) or not G or lr_kind not in (
        "fixed",
        "inverse",
        "strongly_convex",
    ):
        report.checks.append(
            CheckResult("deviation_bound", False, True, "constants unavailable for this run")
        )
        return report

    xbar = x_post.mean(axis=1, keepdims=True)
    consensus = ((x_post - xbar) ** 2).sum(axis=(1, 2))
    estimate = ((x_post - xhat_post) ** 2).sum(axis=(1, 2))
    ratio = (consensus + estimate) / eta**2
    base = 2.0 * n * G * G * H * H
    if lr_kind == "fixed":
        eps = constants.get("eps", 0.5) or 0.5
        eta0 = float(eta[0])
        A = base + (p / 2.0) * (
            8.0 * n * G * G * H * H / omega + 5.0 * omega * n / (4.0 * eta0 ** (1.0 - eps))
        )
        bound = np.full(rounds, 4.0 * A / (p * p))
        label = "fixed-LR"
    else:
        A_t = base + (p / 2.0) * (8.0 * n * G * G * H * H / omega + 5.0 * omega * n * c_arr / 4.0)
        bound = 20.0 * A_t / (p * p)
        label = "decaying-LR"
    frac = ratio / bound
    bad = np.nonzero(frac > 1.0)[0]
    first = (int(t_arr[bad[0]]),) if len(bad) else None
    report.checks.append(
        CheckResult(
            "deviation_bound",
            True,
            first is None,
            f"{label} deviation ratio peaks at {float(frac.max()):.3g} of its bound "
            f"(G measured = {G:.4g})"
            + (f"; first violation at t={first[0]}" if first else ""),
            first_violation=first,
            worst=float(frac.max()),
        )
    )
    return report


def compare_bits_to_accuracy(logs: dict[str, RunLog], target_gap: float) -> dict[str, dict]:
    """First crossing of the optimality-gap target on the cumulative-bits axis.

    Returns {name: {reached, t, bits}} with None markers when a run never
    reaches the target.
    """
    out = {}
    for name, log in logs.items():
        gaps = log.column("optimality_gap")
        hits = np.nonzero(gaps <= target_gap)[0]
        if len(hits) == 0:
            out[name] = {"reached": False, "t": None, "bits": None}
        else:
            t = int(hits[0])
            out[name] = {
                "reached": True,
                "t": t,
                "bits": int(log.column("bits_cumulative")[t]),
            }
    return out


def rate_fit(series: np.ndarray, burn_in: float = 0.2) -> dict:
    """Least-squares slope of log(series) vs log(t) after a burn-in fraction.

    Non-positive and non-finite points are dropped.  Returns slope,
    intercept, r2, and the number of points used.
    """
    series = np.asarray(series, dtype=float)
    T = len(series)
    if not (0.0 <= burn_in < 1.0):
        raise ValueError("burn_in must be in [0, 1)")
    start = max(1, int(math.floor(burn_in * T)))
    t = np.arange(T)[start:]
    y = series[start:]
    keep = np.isfinite(y) & (y > 0) & (t > 0)
    t, y = t[keep], y[keep]
    if len(t) < 100:
        raise ValueError(f"rate_fit needs at least 100 usable points past burn-in, got {len(t)}")
    lx, ly = np.log(t), np.log(y)
    slope, intercept = np.polyfit(lx, ly, 1)
    pred = slope * lx + intercept
    ss_res = float(((ly - pred) ** 2).sum())
    ss_tot = float(((ly - ly.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return {"slope": float(slope), "intercept": float(intercept), "r2": r2, "points": len(t)}


@dataclass
class RunResult:
    log: RunLog
    states: dict | None
    report: AuditReport | None


def _build_mixing(cfg):
    from .mixing_graph import build_complete, build_custom, build_ring

    g = cfg.graph
    kind = g["kind"]
    if kind == "ring":
        return build_ring(g["n"], g.get("weights", "uniform"))
    if kind == "complete":
        return build_complete(g["n"])
    if kind == "custom":
        return build_custom(g["n"], [tuple(e) for e in g["edges"]], g.get("weights", "metropolis"))
    raise ValueError(f"unknown graph kind {kind!r}")


def _build_objective(cfg):
    from .objectives import (
        load_csv_dataset,
        make_logistic,
        make_logistic_from_data,
        make_nonconvex,
        make_quadratic,
    )

    o = cfg.objective
    n = cfg.graph["n"]
    kind = o["kind"]
    if kind == "quadratic":
        return make_quadratic(
            n=n,
            d=o["d"],
            mu=o.get("mu", 1.0),
            L=o.get("L", 10.0),
            noise_std=o.get("noise_std", 0.5),
            heterogeneity=o.get("heterogeneity", 0.0),
            seed=cfg.seed,
        )
    if kind == "logistic":
        if o.get("data"):
            feats, labels = load_csv_dataset(o["data"])
            return make_logistic_from_data(
                feats, labels, n=n, lam=o.get("lam", 0.01), shard=o.get("shard", "iid"),
                seed=cfg.seed,
            )
        return make_logistic(
            n=n,
            d=o["d"],
            samples_per_node=o.get("samples_per_node", 50),
            lam=o.get("lam", 0.01),
            separation=o.get("separation", 2.0),
            shard=o.get("shard", "iid"),
            seed=cfg.seed,
        )
    if kind == "nonconvex":
        return make_nonconvex(
            n=n,
            d=o["d"],
            samples_per_node=o.get("samples_per_node", 40),
            feature_scale=o.get("feature_scale", 0.4),
            x_true_scale=o.get("x_true_scale", 3.0),
            seed=cfg.seed,
        )
    raise ValueError(f"unknown objective kind {kind!r}")


def _build_lr(cfg, objective):
    from .sparq_core import LRSchedule

    lr = cfg.lr
    kind = lr["kind"]
    if kind == "fixed":
        eta = lr.get("eta")
        if eta is None or eta in ("auto", "sqrt_n_over_T"):
            eta = math.sqrt(cfg.graph["n"] / cfg.T)
        return LRSchedule(kind="fixed", eta_fixed=float(eta))
    if kind == "inverse":
        return LRSchedule(kind="inverse", a=float(lr["a"]), b=float(lr["b"]))
    if kind == "strongly_convex":
        mu = lr.get("mu", "auto")
        if mu == "auto":
            mu = objective.constants()["mu"]
            if mu <= 0:
                raise ValueError("strongly_convex LR needs mu > 0; objective reports mu = 0")
        return LRSchedule(kind="strongly_convex", a=float(lr["a"]), mu=float(mu))
    raise ValueError(f"unknown lr kind {kind!r}")


def _build_trigger(cfg):
    from .sparq_core import TriggerSchedule

    tr = cfg.trigger
    kind = tr["kind"]
    if kind == "always":
        return TriggerSchedule.always()
    if kind == "constant":
        return TriggerSchedule(kind="constant", c0=float(tr["c0"]), eps=float(tr.get("eps", 0.5)))
    if kind == "power":
        return TriggerSchedule(kind="power", c0=float(tr["c0"]), eps=float(tr["eps"]))
    if kind == "piecewise":
        steps = tuple((int(t), float(v)) for t, v in tr["steps"])
        return TriggerSchedule(kind="piecewise", steps=steps, eps=float(tr.get("eps", 0.5)))
    raise ValueError(f"unknown trigger kind {kind!r}")


def execute(cfg) -> RunResult:
    """Run the experiment a normalized config describes; audits when states
    are recorded.  cfg is an ExperimentConfig (or anything shaped like one)."""
    from .baselines import run_centralized, run_vanilla_exact
    from .compression import make_operator
    from .sparq_core import SyncSchedule, TriggerSchedule, init_run, run

    objective = _build_objective(cfg)
    lr = _build_lr(cfg, objective)
    algorithm = cfg.algorithm

    if algorithm == "centralized":
        log = run_centralized(
            objective,
            lr,
            T=cfg.T,
            seed=cfg.seed,
            init=cfg.init,
            oracle_mode=cfg.oracle["mode"],
            minibatch=cfg.oracle["minibatch"],
        )
        log.config = cfg.to_dict()
        return RunResult(log=log, states=None, report=None)

    mixing = _build_mixing(cfg)
    if algorithm == "vanilla":
        log = run_vanilla_exact(
            mixing,
            objective,
            lr,
            T=cfg.T,
            seed=cfg.seed,
            init=cfg.init,
            oracle_mode=cfg.oracle["mode"],
            minibatch=cfg.oracle["minibatch"],
            bit_counting=cfg.bit_counting,
        )
        log.config = cfg.to_dict()
        return RunResult(log=log, states=None, report=None)

    comp = cfg.compression
    op = make_operator(comp["kind"], k=comp.get("k"), s=comp.get("s"))
    if algorithm == "choco":
        trigger = TriggerSchedule.always()
        sync = SyncSchedule.periodic(1, cfg.T)
    elif algorithm == "sparq":
        trigger = _build_trigger(cfg)
        sync = SyncSchedule.periodic(cfg.H, cfg.T)
    else:
        raise ValueError(f"unknown algorithm {algorithm!r}")

    sim = init_run(
        mixing,
        objective,
        lr=lr,
        trigger=trigger,
        sync=sync,
        compression=op,
        seed=cfg.seed,
        gamma=cfg.gamma,
        init=cfg.init,
        oracle_mode=cfg.oracle["mode"],
        minibatch=cfg.oracle["minibatch"],
        bit_counting=cfg.bit_counting,
        forced_initial_broadcast=cfg.forced_initial_broadcast,
        enforce_theorem_preconditions=cfg.enforce_theorem_preconditions,
        record_states=cfg.record_states,
    )
    log = run(sim, cfg.T, algorithm=algorithm)
    log.config = cfg.to_dict()
    states = sim.recorder.arrays() if sim.recorder is not None else None
    report = None
    if states is not None:
        report = audit(states, log.constants, measured_G=log.summary["measured_G"])
    return RunResult(log=log, states=states, report=report)


def write_run_dir(out_dir, result: RunResult) -> Path:
    """Write run.csv, summary.json, and states.npz (when recorded)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "run.csv", "w", newline="") as f:
        result.log.to_csv(f)
    with open(out / "summary.json", "w") as f:
        json.dump(result.log.sidecar(result.report), f, indent=2, sort_keys=True)
        f.write("\n")
    if result.states is not None:
        np.savez_compressed(out / "states.npz", **result.states)
    return out


def load_run_dir(run_dir) -> tuple[dict, dict | None]:
    """Load the JSON sidecar and, when present, the recorded states."""
    run_dir = Path(run_dir)
    with open(run_dir / "summary.json") as f:
        sidecar = json.load(f)
    states = None
    npz = run_dir / "states.npz"
    if npz.exists():
        with np.load(npz) as z:
            states = {k: z[k] for k in z.files}
    return sidecar, states
