"""The event-triggered compressed decentralized SGD state machine.

Each iteration t every node takes one stochastic gradient step

    x_i^(t+1/2) = x_i^(t) - eta_t g_i^(t).

When t+1 is a synchronization index, node i checks the event trigger

    ||x_i^(t+1/2) - xhat_i^(t)||^2  >  c_t * eta_t^2        (strict)

and, if it fires, broadcasts q_i = C(x_i^(t+1/2) - xhat_i^(t)) to its
neighbours (non-triggering nodes send nothing, at zero bit cost).  Every
node then updates its replicas xhat_j += q_j for each j it tracks (self
included) and applies the consensus correction

    x_i^(t+1) = x_i^(t+1/2) + gamma * sum_j w_ij (xhat_j^(t+1) - xhat_i^(t+1)).

Between synchronization indices the estimates are frozen.  At init every
node's estimates start at zero and, unless disabled, a forced compressed
broadcast of the initial parameters seeds them with real data (its bits are
charged to the t=0 log row).

Determinism contract: every floating-point reduction happens in a canonical
order (gradients drawn for nodes 0..n-1; replica updates and the consensus
sum iterate over ascending node ids), and all randomness comes from streams
derived from the master seed.  Two runs with the same seed are bit-identical,
and so is the independently coded always-communicate reference in the
baselines module.

Replicas are honest: node i keeps its own copy of xhat_j as a separate
array, and the engine verifies after every round that all copies agree
bit-for-bit, which is what a synchronous deterministic network guarantees.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .compression import CompressionOp, bit_cost_model, compress, omega_of
from .mixing_graph import ConsensusParams, MixingMatrix, consensus_params, spectral_info
from .objectives import GradOracle
from .seeding import stream


class ScheduleError(ValueError):
    """A schedule precondition was violated (maps to config-error exit)."""


class DivergenceError(RuntimeError):
    """An iterate became non-finite; carries where, and the log so far."""

    def __init__(self, t: int, node: int, partial_log=None):
        super().__init__(f"non-finite iterate at t={t}, node {node}")
        self.t = t
        self.node = node
        self.partial_log = partial_log


class ReplicaConsistencyError(RuntimeError):
    pass


@dataclass(frozen=True)
class SyncSchedule:
    """Ordered synchronization indices; the round at iteration t runs when
    t+1 is in the set.  Gaps (including from 0 to the first index) are <= H."""

    indices: tuple[int, ...]
    H: int

    def __post_init__(self):
        if self.H < 1:
            raise ScheduleError(f"H must be >= 1, got {self.H}")
        idx = self.indices
        if list(idx) != sorted(set(idx)):
            raise ScheduleError("sync indices must be strictly increasing")
        if idx and idx[0] < 1:
            raise ScheduleError("sync indices start at 1 (index t+1 for iteration t)")
        prev = 0
        for i in idx:
            if i - prev > self.H:
                raise ScheduleError(f"gap {prev}->{i} exceeds H={self.H}")
            prev = i

    @classmethod
    def periodic(cls, H: int, T: int) -> "SyncSchedule":
        return cls(indices=tuple(range(H, T + 1, H)), H=H)

    def mask(self, T: int) -> np.ndarray:
        """mask[t] is True when iteration t ends with a synchronization round."""
        m = np.zeros(T, dtype=bool)
        for i in self.indices:
            if 1 <= i <= T:
                m[i - 1] = True
        return m


@dataclass(frozen=True)
class TriggerSchedule:
    """Threshold sequence c_t for the event trigger.

    kinds: constant(c0); power(c0, eps) with c_t = c0 * t^(1-eps), eps in (0,1);
    piecewise(steps) where steps are (start_t, value) pairs.  always_trigger
    bypasses the check entirely (the always-communicate baseline).  eps is
    also carried for analysis on the non-power kinds (fixed-LR runs compare
    c_t against eta^-(1-eps)).
    """

    kind: str = "constant"
    c0: float = 0.0
    eps: float = 0.5
    steps: tuple = ()
    always_trigger: bool = False

    def __post_init__(self):
        if self.kind not in ("constant", "power", "piecewise"):
            raise ScheduleError(f"unknown trigger kind {self.kind!r}")
        if self.c0 < 0:
            raise ScheduleError("c0 must be nonnegative")
        if not (0.0 < self.eps < 1.0):
            raise ScheduleError(f"eps must be in (0,1), got {self.eps}")
        if self.kind == "piecewise":
            if not self.steps:
                raise ScheduleError("piecewise trigger needs at least one (t, value) step")
            starts = [s[0] for s in self.steps]
            if starts != sorted(starts) or starts[0] != 0:
                raise ScheduleError("piecewise steps must start at t=0 and be sorted")
            if any(s[1] < 0 for s in self.steps):
                raise ScheduleError("piecewise thresholds must be nonnegative")

    def c(self, t: int) -> float:
        if self.kind == "constant":
            return self.c0
        if self.kind == "power":
            return self.c0 * t ** (1.0 - self.eps)
        val = self.steps[0][1]
        for start, v in self.steps:
            if t >= start:
                val = v
            else:
                break
        return float(val)

    @classmethod
    def always(cls) -> "TriggerSchedule":
        return cls(kind="constant", c0=0.0, always_trigger=True)


@dataclass(frozen=True)
class LRSchedule:
    """fixed(eta); inverse(a, b): eta_t = b/(a+t);
    strongly_convex(mu, a): eta_t = 8/(mu (a+t))."""

    kind: str
    eta_fixed: float = 0.0
    a: float = 0.0
    b: float = 0.0
    mu: float = 0.0

    def __post_init__(self):
        if self.kind == "fixed":
            if self.eta_fixed <= 0:
                raise ScheduleError("fixed LR needs eta > 0")
        elif self.kind == "inverse":
            if self.a <= 0 or self.b <= 0:
                raise ScheduleError("inverse LR needs a > 0 and b > 0")
        elif self.kind == "strongly_convex":
            if self.a <= 0 or self.mu <= 0:
                raise ScheduleError("strongly_convex LR needs a > 0 and mu > 0")
        else:
            raise ScheduleError(f"unknown LR kind {self.kind!r}")

    def eta(self, t: int) -> float:
        if self.kind == "fixed":
            return self.eta_fixed
        if self.kind == "inverse":
            return self.b / (self.a + t)
        return 8.0 / (self.mu * (self.a + t))

    @property
    def averaging_a(self) -> float | None:
        """Offset for the (a+t)^2 averaging weights; None means uniform."""
        return self.a if self.kind in ("inverse", "strongly_convex") else None


@dataclass
class NodeState:
    """One worker: parameters plus its replicas of the public estimates."""

    node_id: int
    x: np.ndarray
    x_hat: dict[int, np.ndarray]  # subject id -> estimate copy; includes self

    @property
    def x_hat_self(self) -> np.ndarray:
        return self.x_hat[self.node_id]


@dataclass
class RoundOutcome:
    communicated: np.ndarray  # (n,) bool
    bits_sent: np.ndarray  # (n,) int
    consensus_distance: float  # sum_j ||xbar - x_j||^2 after the round
    estimate_gap: float  # sum_j ||x_j - xhat_j||^2 after the round


class StateRecorder:
    """Per-sync-round snapshots for the offline auditor."""

    def __init__(self, pair_index: list[tuple[int, int]]):
        self.pair_index = np.array(pair_index, dtype=np.int64)
        self.t: list[int] = []
        self.eta: list[float] = []
        self.c: list[float] = []
        self.x_half: list[np.ndarray] = []
        self.xhat_pre: list[np.ndarray] = []
        self.xhat_post: list[np.ndarray] = []
        self.x_post: list[np.ndarray] = []
        self.triggered: list[np.ndarray] = []
        self.replicas_post: list[np.ndarray] = []

    def record(self, t, eta, c, x_half, xhat_pre, xhat_post, x_post, triggered, replicas_post):
        self.t.append(t)
        self.eta.append(eta)
        self.c.append(c)
        self.x_half.append(x_half)
        self.xhat_pre.append(xhat_pre)
        self.xhat_post.append(xhat_post)
        self.x_post.append(x_post)
        self.triggered.append(triggered)
        self.replicas_post.append(replicas_post)

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "t": np.array(self.t, dtype=np.int64),
            "eta": np.array(self.eta),
            "c": np.array(self.c),
            "x_half": np.array(self.x_half),
            "xhat_pre": np.array(self.xhat_pre),
            "xhat_post": np.array(self.xhat_post),
            "x_post": np.array(self.x_post),
            "triggered": np.array(self.triggered),
            "pair_index": self.pair_index,
            "replicas_post": np.array(self.replicas_post),
        }


@dataclass
class SimState:
    mixing: MixingMatrix
    objective: object
    oracle: GradOracle
    lr: LRSchedule
    trigger: TriggerSchedule
    sync: SyncSchedule
    comp_ops: list[CompressionOp]
    consensus: ConsensusParams | None
    gamma: float
    p: float
    omega: float
    X: np.ndarray  # (n, d) current parameters
    replicas: list[dict[int, np.ndarray]]  # replicas[i][j] = node i's copy of xhat_j
    seed: int
    bit_counting: str = "broadcast"
    forced_initial_broadcast: bool = True
    enforce_preconditions: bool = False
    record_states: bool = False
    recorder: StateRecorder | None = None
    initial_bits: int = 0
    t: int = 0
    measured_G: float = 0.0
    message_bits: int = 0  # wire cost of one broadcast, fixed per run

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def node_state(self, i: int) -> NodeState:
        return NodeState(node_id=i, x=self.X[i], x_hat=self.replicas[i])

    def own_estimates(self) -> np.ndarray:
        return np.stack([self.replicas[i][i] for i in range(self.n)])


def _node_bits(sim: SimState, i: int) -> int:
    if sim.bit_counting == "per_edge":
        return sim.message_bits * len(sim.mixing.neighbors[i])
    return sim.message_bits


def _initial_broadcast(sim: SimState) -> int:
    """Every node compresses its initial parameters against the zero estimate
    and all replicas ingest the result; no consensus step runs."""
    n = sim.n
    q = [compress(sim.comp_ops[i], sim.X[i].copy())[0] for i in range(n)]
    for i in range(n):
        for j in sim.replicas[i]:
            sim.replicas[i][j] = sim.replicas[i][j] + q[j]
    _check_replicas(sim)
    return sum(_node_bits(sim, i) for i in range(n))


def _check_replicas(sim: SimState) -> None:
    for i in range(sim.n):
        for j, copy_ij in sim.replicas[i].items():
            if not np.array_equal(copy_ij, sim.replicas[j][j]):
                raise ReplicaConsistencyError(
                    f"node {i}'s replica of node {j} drifted from the owner's value"
                )


def init_run(
    mixing: MixingMatrix,
    objective,
    lr: LRSchedule,
    trigger: TriggerSchedule,
    sync: SyncSchedule,
    compression: CompressionOp,
    seed: int,
    gamma: float | str = "auto",
    init: str = "zeros",
    oracle_mode: str = "stochastic",
    minibatch: int = 8,
    bit_counting: str = "broadcast",
    forced_initial_broadcast: bool = True,
    enforce_theorem_preconditions: bool = False,
    record_states: bool = False,
) -> SimState:
    """Build a ready-to-run state: initial parameters, zeroed estimates, the
    consensus step-size, per-node RNG streams, and the forced first broadcast."""
    n, d = objective.n, objective.d
    if mixing.n != n:
        raise ValueError(f"graph has {mixing.n} nodes but objective has {n}")
    if bit_counting not in ("broadcast", "per_edge"):
        raise ValueError(f"unknown bit_counting mode {bit_counting!r}")

    omega = omega_of(compression, d).omega
    info = spectral_info(mixing)
    cons = consensus_params(info, omega)
    if gamma == "auto":
        gamma_val, p_val = cons.gamma, cons.p
    else:
        gamma_val = float(gamma)
        if not (0.0 < gamma_val <= 1.0):
            raise ValueError(f"gamma must be in (0, 1], got {gamma_val}")
        p_val = gamma_val * info.delta / 8.0

    _check_preconditions(lr, trigger, sync, objective, p_val, enforce_theorem_preconditions)

    if init == "zeros":
        X = np.zeros((n, d))
    elif init == "gaussian":
        X = np.tile(stream(seed, "init").standard_normal(d), (n, 1))
    elif init == "per_node_gaussian":
        X = np.stack([stream(seed, "init", i).standard_normal(d) for i in range(n)])
    else:
        raise ValueError(f"unknown init {init!r}")

    comp_ops = [compression.with_rng(stream(seed, "comp", i)) for i in range(n)]
    replicas = []
    for i in range(n):
        members = sorted(set(mixing.neighbors[i]) | {i})
        replicas.append({j: np.zeros(d) for j in members})

    sim = SimState(
        mixing=mixing,
        objective=objective,
        oracle=GradOracle(objective, seed, mode=oracle_mode, minibatch=minibatch),
        lr=lr,
        trigger=trigger,
        sync=sync,
        comp_ops=comp_ops,
        consensus=cons,
        gamma=gamma_val,
        p=p_val,
        omega=omega,
        X=X,
        replicas=replicas,
        seed=seed,
        bit_counting=bit_counting,
        forced_initial_broadcast=forced_initial_broadcast,
        enforce_preconditions=enforce_theorem_preconditions,
        record_states=record_states,
    )
    sim.message_bits = bit_cost_model(compression, d)
    if record_states:
        pairs = [(i, j) for i in range(n) for j in sorted(replicas[i])]
        sim.recorder = StateRecorder(pairs)
    if forced_initial_broadcast:
        sim.initial_bits = _initial_broadcast(sim)
    return sim


def _check_preconditions(lr, trigger, sync, objective, p, enforce) -> None:
    """Schedule preconditions for the convergence guarantees; errors only when enforcement is
    on and the needed constants are actually known for this objective."""
    notes = []
    consts = objective.constants()
    L, mu = consts["L"], consts["mu"]
    if lr.kind == "strongly_convex":
        bound = max(5.0 * sync.H / p, 32.0 * L / max(mu, 1e-300))
        if lr.a < bound:
            notes.append(
                f"decaying-LR precondition a >= max{{5H/p, 32L/mu}} violated: "
                f"a={lr.a:g} < {bound:g} (H={sync.H}, p={p:.3g}, L={L:g}, mu={mu:g})"
            )
    if lr.kind == "fixed" and sync.indices:
        horizon = sync.indices[-1]
        cap = lr.eta_fixed ** -(1.0 - trigger.eps)
        worst = max(trigger.c(t) for t in range(horizon + 1))
        if worst > cap * (1 + 1e-12):
            notes.append(
                f"fixed-LR trigger precondition c_t <= eta^-(1-eps) violated: "
                f"max c_t = {worst:g} > {cap:g} (eta={lr.eta_fixed:g}, eps={trigger.eps:g})"
            )
    knowable = mu > 0
    for note in notes:
        if enforce and knowable:
            raise ScheduleError(note)
        warnings.warn(note, stacklevel=3)


def local_step(sim: SimState, t: int, grads: np.ndarray | None = None) -> np.ndarray:
    """One stochastic gradient step on every node; returns x^(t+1/2) as an
    array without touching the estimates.  Raises on non-finite iterates."""
    n = sim.n
    eta = sim.lr.eta(t)
    if grads is None:
        grads = np.empty_like(sim.X)
        for i in range(n):
            grads[i] = sim.oracle.grad(i, sim.X[i])
    norms_sq = np.einsum("ij,ij->i", grads, grads)
    g_max = float(np.max(norms_sq))
    if g_max > sim.measured_G * sim.measured_G:
        sim.measured_G = float(np.sqrt(g_max))
    x_half = sim.X - eta * grads
    if not np.all(np.isfinite(x_half)):
        bad = int(np.where(~np.isfinite(x_half).all(axis=1))[0][0])
        raise DivergenceError(t=t, node=bad)
    return x_half


def sync_round(sim: SimState, t: int, x_half: np.ndarray) -> RoundOutcome:
    """Trigger check, compressed exchange, replica update, consensus step.

    Mutates sim.X and sim.replicas; must only be called when t+1 is a
    synchronization index.
    """
    n, d = sim.n, sim.d
    eta = sim.lr.eta(t)
    c_t = sim.trigger.c(t)
    threshold = c_t * eta * eta

    if sim.record_states:
        xhat_pre = sim.own_estimates()

    triggered = np.zeros(n, dtype=bool)
    q = np.zeros((n, d))
    bits = np.zeros(n, dtype=np.int64)
    for i in range(n):
        delta = x_half[i] - sim.replicas[i][i]
        if sim.trigger.always_trigger or float(delta @ delta) > threshold:
            triggered[i] = True
            q[i], _ = compress(sim.comp_ops[i], delta)
            bits[i] = _node_bits(sim, i)

    fired = [j for j in range(n) if triggered[j]]
    for i in range(n):
        rep = sim.replicas[i]
        for j in fired:
            if j in rep:
                rep[j] = rep[j] + q[j]

    new_X = np.empty_like(x_half)
    gamma = sim.gamma
    W = sim.mixing.W
    for i in range(n):
        rep = sim.replicas[i]
        own = rep[i]
        acc = np.zeros(d)
        for j in sim.mixing.neighbors[i]:
            acc += W[i, j] * (rep[j] - own)
        new_X[i] = x_half[i] + gamma * acc
    sim.X = new_X

    _check_replicas(sim)

    xbar = new_X.mean(axis=0)
    own = sim.own_estimates()
    outcome = RoundOutcome(
        communicated=triggered,
        bits_sent=bits,
        consensus_distance=float(((new_X - xbar) ** 2).sum()),
        estimate_gap=float(((new_X - own) ** 2).sum()),
    )
    if sim.record_states:
        sim.recorder.record(
            t=t,
            eta=eta,
            c=c_t,
            x_half=x_half.copy(),
            xhat_pre=xhat_pre,
            xhat_post=own,
            x_post=new_X.copy(),
            triggered=triggered.copy(),
            replicas_post=np.stack(
                [sim.replicas[i][j] for i, j in sim.recorder.pair_index]
            ),
        )
    return outcome


COLUMNS = (
    "t",
    "eta_t",
    "c_t",
    "train_loss",
    "optimality_gap",
    "grad_norm_sq",
    "consensus_distance",
    "estimate_gap",
    "nodes_triggered",
    "bits_round",
    "bits_cumulative",
)


def _constants_for(sim: SimState, algorithm: str) -> dict:
    consts = sim.objective.constants()
    cons = sim.consensus
    f_star = getattr(sim.objective, "f_star", None)
    return {
        "algorithm": algorithm,
        "n": sim.n,
        "d": sim.d,
        "H": sim.sync.H,
        "L": consts["L"],
        "mu": consts["mu"],
        "G_estimate": consts["G_estimate"],
        "sigma_bar": consts["sigma_bar"],
        "delta": cons.delta if cons else None,
        "beta": cons.beta if cons else None,
        "gamma": sim.gamma,
        "p": sim.p,
        "omega": sim.omega,
        "eps": sim.trigger.eps,
        "lr_kind": sim.lr.kind,
        "lr_eta": sim.lr.eta_fixed,
        "lr_a": sim.lr.a,
        "lr_b": sim.lr.b,
        "lr_mu": sim.lr.mu,
        "trigger_kind": sim.trigger.kind,
        "trigger_c0": sim.trigger.c0,
        "always_trigger": sim.trigger.always_trigger,
        "f_star": f_star,
        "message_bits": sim.message_bits,
        "bit_counting": sim.bit_counting,
        "forced_initial_broadcast": sim.forced_initial_broadcast,
    }


def run(sim: SimState, T: int, algorithm: str = "sparq"):
    """Execute T iterations and return the populated RunLog.

    Maintains the weighted average iterate sum w_t xbar^(t) / S_T over all
    T+1 iterates, with w_t = (a+t)^2 for the decaying schedules and uniform
    weights for fixed LR.  On divergence, raises with the partial log
    attached.
    """
    import time

    from .harness import RunLog

    if T < 1:
        raise ValueError(f"horizon must be >= 1, got {T}")
    obj = sim.objective
    f_star = getattr(obj, "f_star", None)
    n, d = sim.n, sim.d
    mask = sim.sync.mask(T)
    a_w = sim.lr.averaging_a
    data = np.empty((T, len(COLUMNS)))
    wx = np.zeros(d)
    wsum = 0.0
    bits_cum = 0
    own_est = sim.own_estimates()
    xbar = sim.X.mean(axis=0)
    started = time.perf_counter()

    def _weight(t: int) -> float:
        return (a_w + t) ** 2 if a_w is not None else 1.0

    def _finish_log(rows: int, diverged: bool) -> RunLog:
        x_avg = wx / wsum if wsum > 0 else xbar.copy()
        f_avg = obj.global_loss(x_avg)
        summary = {
            "seed": sim.seed,
            "iterations": rows,
            "S_T": wsum,
            "x_bar_avg": [float(v) for v in x_avg],
            "f_x_bar_avg": f_avg,
            "gap_x_bar_avg": (f_avg - f_star) if f_star is not None else None,
            "final_train_loss": float(data[rows - 1, 3]) if rows else None,
            "final_gap": float(data[rows - 1, 4]) if rows else None,
            "measured_G": sim.measured_G,
            "total_bits": int(bits_cum),
            "wall_time": time.perf_counter() - started,
            "diverged": diverged,
        }
        return RunLog(
            data=data[:rows].copy(),
            summary=summary,
            constants=_constants_for(sim, algorithm),
        )

    t = 0
    try:
        for t in range(T):
            w = _weight(t)
            wx += w * xbar
            wsum += w
            eta = sim.lr.eta(t)
            c_t = sim.trigger.c(t)
            x_half = local_step(sim, t)
            if mask[t]:
                outcome = sync_round(sim, t, x_half)
                own_est = sim.own_estimates()
                triggered_count = int(outcome.communicated.sum())
                bits_round = int(outcome.bits_sent.sum())
                cons_dist = outcome.consensus_distance
                est_gap = outcome.estimate_gap
                xbar = sim.X.mean(axis=0)
            else:
                sim.X = x_half
                xbar = sim.X.mean(axis=0)
                triggered_count = 0
                bits_round = 0
                cons_dist = float(((sim.X - xbar) ** 2).sum())
                est_gap = float(((sim.X - own_est) ** 2).sum())
            if t == 0:
                bits_round += sim.initial_bits
            bits_cum += bits_round
            loss = obj.global_loss(xbar)
            gap = (loss - f_star) if f_star is not None else np.nan
            g = obj.global_grad(xbar)
            data[t] = (
                t,
                eta,
                c_t,
                loss,
                gap,
                float(g @ g),
                cons_dist,
                est_gap,
                triggered_count,
                bits_round,
                bits_cum,
            )
            sim.t = t + 1
    except DivergenceError as err:
        err.partial_log = _finish_log(t, diverged=True)
        raise

    w = _weight(T)
    wx += w * xbar
    wsum += w
    return _finish_log(T, diverged=False)
