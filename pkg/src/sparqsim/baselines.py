"""Reference algorithms for comparison and equivalence testing.

run_choco drives the main engine with H=1 and the trigger bypassed, which is
exactly the always-communicate compressed gossip algorithm.  choco_reference
is a second, deliberately straight-line implementation of the same update
rule: it shares the seed derivation, the compression routines, and the metric
definitions, but rebuilds the replica bookkeeping, trigger-free exchange, and
consensus algebra from scratch in flat arrays.  The equivalence test drives
both from one seed and requires bit-identical logs; a divergence means one of
the two transcriptions of the update rule is wrong.

run_vanilla_exact is decentralized SGD with exact parameter exchange every
iteration (x <- W x after each gradient step, full 32-bit payloads), and
run_centralized is single-sequence mini-batch SGD averaging the n per-node
gradient oracles, the communication-free yardstick.
"""

from __future__ import annotations

import time

import numpy as np

from .compression import CompressionOp, bit_cost_model, compress, make_operator
from .mixing_graph import MixingMatrix, spectral_info
from .objectives import GradOracle
from .seeding import stream
from .sparq_core import (
    COLUMNS,
    DivergenceError,
    LRSchedule,
    SyncSchedule,
    TriggerSchedule,
    init_run,
    run,
)


def run_choco(
    mixing: MixingMatrix,
    objective,
    lr: LRSchedule,
    compression: CompressionOp,
    T: int,
    seed: int,
    gamma: float | str = "auto",
    **kwargs,
):
    """Always-communicate compressed gossip SGD: the engine with H=1 and no trigger."""
    sim = init_run(
        mixing,
        objective,
        lr=lr,
        trigger=TriggerSchedule.always(),
        sync=SyncSchedule.periodic(1, T),
        compression=compression,
        seed=seed,
        gamma=gamma,
        **kwargs,
    )
    return run(sim, T, algorithm="choco")


def choco_reference(
    mixing: MixingMatrix,
    objective,
    lr: LRSchedule,
    compression: CompressionOp,
    T: int,
    seed: int,
    gamma: float | str = "auto",
    init: str = "zeros",
    oracle_mode: str = "stochastic",
    minibatch: int = 8,
    bit_counting: str = "broadcast",
    forced_initial_broadcast: bool = True,
):
    """Straight-line always-communicate compressed gossip, coded independently
    of the engine.  Used only by equivalence tests."""
    from .harness import RunLog
    from .mixing_graph import consensus_params
    from .compression import omega_of

    n, d = objective.n, objective.d
    W = mixing.W
    neighbors = mixing.neighbors
    omega = omega_of(compression, d).omega
    info = spectral_info(mixing)
    cons = consensus_params(info, omega)
    gamma_val = cons.gamma if gamma == "auto" else float(gamma)
    p_val = gamma_val * info.delta / 8.0
    message_bits = bit_cost_model(compression, d)

    if init == "zeros":
        X = np.zeros((n, d))
    elif init == "gaussian":
        X = np.tile(stream(seed, "init").standard_normal(d), (n, 1))
    elif init == "per_node_gaussian":
        X = np.stack([stream(seed, "init", i).standard_normal(d) for i in range(n)])
    else:
        raise ValueError(f"unknown init {init!r}")

    ops = [compression.with_rng(stream(seed, "comp", i)) for i in range(n)]
    oracle = GradOracle(objective, seed, mode=oracle_mode, minibatch=minibatch)
    xhat = np.zeros((n, d))

    def node_bits(i: int) -> int:
        return message_bits * (len(neighbors[i]) if bit_counting == "per_edge" else 1)

    initial_bits = 0
    if forced_initial_broadcast:
        for i in range(n):
            q_i, _ = compress(ops[i], X[i].copy())
            xhat[i] = xhat[i] + q_i
        initial_bits = sum(node_bits(i) for i in range(n))

    f_star = getattr(objective, "f_star", None)
    a_w = lr.averaging_a
    data = np.empty((T, len(COLUMNS)))
    wx = np.zeros(d)
    wsum = 0.0
    bits_cum = 0
    measured_G = 0.0
    grads = np.empty_like(X)
    xbar = X.mean(axis=0)
    started = time.perf_counter()

    for t in range(T):
        w = (a_w + t) ** 2 if a_w is not None else 1.0
        wx += w * xbar
        wsum += w
        eta = lr.eta(t)
        for i in range(n):
            grads[i] = oracle.grad(i, X[i])
        norms_sq = np.einsum("ij,ij->i", grads, grads)
        g_max = float(np.max(norms_sq))
        if g_max > measured_G * measured_G:
            measured_G = float(np.sqrt(g_max))
        x_half = X - eta * grads
        if not np.all(np.isfinite(x_half)):
            bad = int(np.where(~np.isfinite(x_half).all(axis=1))[0][0])
            raise DivergenceError(t=t, node=bad)

        # every node communicates every iteration
        q = np.zeros((n, d))
        for i in range(n):
            delta = x_half[i] - xhat[i]
            q[i], _ = compress(ops[i], delta)
        for j in range(n):
            xhat[j] = xhat[j] + q[j]
        new_X = np.empty_like(x_half)
        for i in range(n):
            acc = np.zeros(d)
            for j in neighbors[i]:
                acc += W[i, j] * (xhat[j] - xhat[i])
            new_X[i] = x_half[i] + gamma_val * acc
        X = new_X

        bits_round = sum(node_bits(i) for i in range(n))
        if t == 0:
            bits_round += initial_bits
        bits_cum += bits_round
        xbar = X.mean(axis=0)
        loss = objective.global_loss(xbar)
        gap = (loss - f_star) if f_star is not None else np.nan
        g = objective.global_grad(xbar)
        data[t] = (
            t,
            eta,
            0.0,
            loss,
            gap,
            float(g @ g),
            float(((X - xbar) ** 2).sum()),
            float(((X - xhat) ** 2).sum()),
            n,
            bits_round,
            bits_cum,
        )

    w = (a_w + T) ** 2 if a_w is not None else 1.0
    wx += w * xbar
    wsum += w
    x_avg = wx / wsum
    f_avg = objective.global_loss(x_avg)
    consts = objective.constants()
    return RunLog(
        data=data,
        summary={
            "seed": seed,
            "iterations": T,
            "S_T": wsum,
            "x_bar_avg": [float(v) for v in x_avg],
            "f_x_bar_avg": f_avg,
            "gap_x_bar_avg": (f_avg - f_star) if f_star is not None else None,
            "final_train_loss": float(data[-1, 3]),
            "final_gap": float(data[-1, 4]),
            "measured_G": measured_G,
            "total_bits": int(bits_cum),
            "wall_time": time.perf_counter() - started,
            "diverged": False,
        },
        constants={
            "algorithm": "choco-reference",
            "n": n,
            "d": d,
            "H": 1,
            "L": consts["L"],
            "mu": consts["mu"],
            "G_estimate": consts["G_estimate"],
            "sigma_bar": consts["sigma_bar"],
            "delta": info.delta,
            "beta": info.beta,
            "gamma": gamma_val,
            "p": p_val,
            "omega": omega,
            "eps": 0.5,
            "lr_kind": lr.kind,
            "lr_eta": lr.eta_fixed,
            "lr_a": lr.a,
            "lr_b": lr.b,
            "lr_mu": lr.mu,
            "trigger_kind": "constant",
            "trigger_c0": 0.0,
            "always_trigger": True,
            "f_star": f_star,
            "message_bits": message_bits,
            "bit_counting": bit_counting,
            "forced_initial_broadcast": forced_initial_broadcast,
        },
    )


def run_vanilla_exact(
    mixing: MixingMatrix,
    objective,
    lr: LRSchedule,
    T: int,
    seed: int,
    init: str = "zeros",
    oracle_mode: str = "stochastic",
    minibatch: int = 8,
    bit_counting: str = "broadcast",
):
    """Decentralized SGD with exact exchange: x <- W (x - eta g) every iteration."""
    from .harness import RunLog

    n, d = objective.n, objective.d
    W = mixing.W
    info = spectral_info(mixing)
    if init == "zeros":
        X = np.zeros((n, d))
    elif init == "gaussian":
        X = np.tile(stream(seed, "init").standard_normal(d), (n, 1))
    elif init == "per_node_gaussian":
        X = np.stack([stream(seed, "init", i).standard_normal(d) for i in range(n)])
    else:
        raise ValueError(f"unknown init {init!r}")
    oracle = GradOracle(objective, seed, mode=oracle_mode, minibatch=minibatch)
    message_bits = d * 32
    if bit_counting == "per_edge":
        round_bits = sum(message_bits * len(mixing.neighbors[i]) for i in range(n))
    else:
        round_bits = message_bits * n

    f_star = getattr(objective, "f_star", None)
    a_w = lr.averaging_a
    data = np.empty((T, len(COLUMNS)))
    wx = np.zeros(d)
    wsum = 0.0
    bits_cum = 0
    measured_G = 0.0
    grads = np.empty_like(X)
    xbar = X.mean(axis=0)
    started = time.perf_counter()

    for t in range(T):
        w = (a_w + t) ** 2 if a_w is not None else 1.0
        wx += w * xbar
        wsum += w
        eta = lr.eta(t)
        for i in range(n):
            grads[i] = oracle.grad(i, X[i])
        norms_sq = np.einsum("ij,ij->i", grads, grads)
        g_max = float(np.max(norms_sq))
        if g_max > measured_G * measured_G:
            measured_G = float(np.sqrt(g_max))
        x_half = X - eta * grads
        if not np.all(np.isfinite(x_half)):
            bad = int(np.where(~np.isfinite(x_half).all(axis=1))[0][0])
            raise DivergenceError(t=t, node=bad)
        X = W @ x_half
        bits_cum += round_bits
        xbar = X.mean(axis=0)
        loss = objective.global_loss(xbar)
        gap = (loss - f_star) if f_star is not None else np.nan
        g = objective.global_grad(xbar)
        data[t] = (
            t,
            eta,
            np.nan,
            loss,
            gap,
            float(g @ g),
            float(((X - xbar) ** 2).sum()),
            np.nan,
            n,
            round_bits,
            bits_cum,
        )

    w = (a_w + T) ** 2 if a_w is not None else 1.0
    wx += w * xbar
    wsum += w
    x_avg = wx / wsum
    f_avg = objective.global_loss(x_avg)
    consts = objective.constants()
    return RunLog(
        data=data,
        summary={
            "seed": seed,
            "iterations": T,
            "S_T": wsum,
            "x_bar_avg": [float(v) for v in x_avg],
            "f_x_bar_avg": f_avg,
            "gap_x_bar_avg": (f_avg - f_star) if f_star is not None else None,
            "final_train_loss": float(data[-1, 3]),
            "final_gap": float(data[-1, 4]),
            "measured_G": measured_G,
            "total_bits": int(bits_cum),
            "wall_time": time.perf_counter() - started,
            "diverged": False,
        },
        constants={
            "algorithm": "vanilla",
            "n": n,
            "d": d,
            "H": 1,
            "L": consts["L"],
            "mu": consts["mu"],
            "G_estimate": consts["G_estimate"],
            "sigma_bar": consts["sigma_bar"],
            "delta": info.delta,
            "beta": info.beta,
            "gamma": 1.0,
            "p": None,
            "omega": 1.0,
            "eps": None,
            "lr_kind": lr.kind,
            "lr_eta": lr.eta_fixed,
            "lr_a": lr.a,
            "lr_b": lr.b,
            "lr_mu": lr.mu,
            "trigger_kind": None,
            "trigger_c0": None,
            "always_trigger": True,
            "f_star": f_star,
            "message_bits": message_bits,
            "bit_counting": bit_counting,
            "forced_initial_broadcast": False,
        },
    )


def run_centralized(
    objective,
    lr: LRSchedule,
    T: int,
    seed: int,
    init: str = "zeros",
    oracle_mode: str = "stochastic",
    minibatch: int = 8,
):
    """Mini-batch SGD on one sequence, averaging the n per-node oracles."""
    from .harness import RunLog

    n, d = objective.n, objective.d
    if init == "zeros":
        x = np.zeros(d)
    elif init in ("gaussian", "per_node_gaussian"):
        x = stream(seed, "init").standard_normal(d)
    else:
        raise ValueError(f"unknown init {init!r}")
    oracle = GradOracle(objective, seed, mode=oracle_mode, minibatch=minibatch)

    f_star = getattr(objective, "f_star", None)
    a_w = lr.averaging_a
    data = np.empty((T, len(COLUMNS)))
    wx = np.zeros(d)
    wsum = 0.0
    measured_G = 0.0
    grads = np.empty((n, d))
    started = time.perf_counter()

    for t in range(T):
        w = (a_w + t) ** 2 if a_w is not None else 1.0
        wx += w * x
        wsum += w
        eta = lr.eta(t)
        for i in range(n):
            grads[i] = oracle.grad(i, x)
        norms_sq = np.einsum("ij,ij->i", grads, grads)
        g_max = float(np.max(norms_sq))
        if g_max > measured_G * measured_G:
            measured_G = float(np.sqrt(g_max))
        x = x - eta * grads.mean(axis=0)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(t=t, node=0)
        loss = objective.global_loss(x)
        gap = (loss - f_star) if f_star is not None else np.nan
        g = objective.global_grad(x)
        data[t] = (t, eta, np.nan, loss, gap, float(g @ g), 0.0, np.nan, 0, 0, 0)

    w = (a_w + T) ** 2 if a_w is not None else 1.0
    wx += w * x
    wsum += w
    x_avg = wx / wsum
    f_avg = objective.global_loss(x_avg)
    consts = objective.constants()
    return RunLog(
        data=data,
        summary={
            "seed": seed,
            "iterations": T,
            "S_T": wsum,
            "x_bar_avg": [float(v) for v in x_avg],
            "f_x_bar_avg": f_avg,
            "gap_x_bar_avg": (f_avg - f_star) if f_star is not None else None,
            "final_train_loss": float(data[-1, 3]),
            "final_gap": float(data[-1, 4]),
            "measured_G": measured_G,
            "total_bits": 0,
            "wall_time": time.perf_counter() - started,
            "diverged": False,
        },
        constants={
            "algorithm": "centralized",
            "n": n,
            "d": d,
            "H": 0,
            "L": consts["L"],
            "mu": consts["mu"],
            "G_estimate": consts["G_estimate"],
            "sigma_bar": consts["sigma_bar"],
            "delta": None,
            "beta": None,
            "gamma": None,
            "p": None,
            "omega": None,
            "eps": None,
            "lr_kind": lr.kind,
            "lr_eta": lr.eta_fixed,
            "lr_a": lr.a,
            "lr_b": lr.b,
            "lr_mu": lr.mu,
            "trigger_kind": None,
            "trigger_c0": None,
            "always_trigger": False,
            "f_star": f_star,
            "message_bits": 0,
            "bit_counting": "broadcast",
            "forced_initial_broadcast": False,
        },
    )


def run_baseline(kind: str, **kwargs):
    """Dispatch by kind string: choco | vanilla | centralized."""
    if kind == "choco":
        return run_choco(**kwargs)
    if kind in ("vanilla", "vanilla_exact"):
        return run_vanilla_exact(**kwargs)
    if kind in ("centralized", "centralized_sgd"):
        kwargs.pop("mixing", None)
        return run_centralized(**kwargs)
    raise ValueError(f"unknown baseline kind {kind!r}")
