"""Declarative experiment configs and the command-line interface.

Configs are YAML trees with a fixed schema; parsing applies defaults,
validates every key (unknown keys are errors naming the key), and produces
an ExperimentConfig whose render/parse round-trip is exact.  `--set a.b=v`
overrides use dotted paths into the same schema.

Subcommands: run, compare, audit, certify-omega, spectral.
Exit codes: 0 success, 2 config error, 3 numeric divergence, 4 audit (or
certification) failure.
"""

from __future__ import annotations

import copy
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import click
import yaml

from .sparq_core import DivergenceError, ScheduleError


class ConfigError(ValueError):
    pass


# Schema: {key: (default, type-or-checker)}.  A dict default means a nested
# section; "auto"-able numeric fields accept the literal string "auto".
_SCHEMA = {
    "algorithm": ("sparq", ("sparq", "choco", "vanilla", "centralized")),
    "T": (None, int),
    "H": (1, int),
    "seed": (0, int),
    "output": (None, (str, type(None))),
    "gamma": ("auto", "float_or_auto"),
    "init": ("zeros", ("zeros", "gaussian", "per_node_gaussian")),
    "bit_counting": ("broadcast", ("broadcast", "per_edge")),
    "graph": {
        "kind": ("ring", ("ring", "complete", "custom")),
        "n": (8, int),
        "weights": ("uniform", ("uniform", "metropolis")),
        "edges": (None, (list, type(None))),
    },
    "objective": {
        "kind": ("quadratic", ("quadratic", "logistic", "nonconvex")),
        "d": (10, int),
        "mu": (1.0, float),
        "L": (10.0, float),
        "noise_std": (0.5, float),
        "heterogeneity": (0.0, float),
        "samples_per_node": (50, int),
        "lam": (0.01, float),
        "separation": (2.0, float),
        "shard": ("iid", ("iid", "label_sorted")),
        "data": (None, (str, type(None))),
        "feature_scale": (0.6, float),
        "x_true_scale": (3.0, float),
    },
    "compression": {
        "kind": (
            "identity",
            ("identity", "top_k", "rand_k", "sign_l1", "stochastic_quant",
             "sign_top_k", "quant_top_k"),
        ),
        "k": (None, (int, type(None))),
        "s": (None, (int, type(None))),
    },
    "lr": {
        "kind": ("fixed", ("fixed", "inverse", "strongly_convex")),
        "eta": (None, "float_or_auto_or_none"),
        "a": (100.0, float),
        "b": (1.0, float),
        "mu": ("auto", "float_or_auto"),
    },
    "trigger": {
        "kind": ("always", ("always", "constant", "power", "piecewise")),
        "c0": (0.0, float),
        "eps": (0.5, float),
        "steps": (None, (list, type(None))),
    },
    "oracle": {
        "mode": ("stochastic", ("stochastic", "full")),
        "minibatch": (8, int),
    },
    "flags": {
        "record_states": (False, bool),
        "enforce_theorem_preconditions": (False, bool),
        "forced_initial_broadcast": (True, bool),
    },
}


def _coerce(path: str, value, spec):
    if isinstance(spec, tuple) and all(isinstance(s, type) for s in spec):
        if isinstance(value, spec):
            # bools are ints in python; keep them out of int-typed fields
            if int in spec and isinstance(value, bool):
                raise ConfigError(f"config key {path!r}: expected int, got bool")
            return value
        raise ConfigError(
            f"config key {path!r}: expected {'/'.join(s.__name__ for s in spec)}, "
            f"got {type(value).__name__}"
        )
    if isinstance(spec, tuple):  # enum of string literals
        if value in spec:
            return value
        raise ConfigError(f"config key {path!r}: {value!r} not one of {spec}")
    if spec is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {path!r}: expected int, got {value!r}")
        return value
    if spec is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {path!r}: expected number, got {value!r}")
        return float(value)
    if spec is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"config key {path!r}: expected bool, got {value!r}")
        return value
    if spec == "float_or_auto":
        if value == "auto":
            return "auto"
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"config key {path!r}: expected number or 'auto', got {value!r}")
    if spec == "float_or_auto_or_none":
        if value is None or value == "auto":
            return value
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"config key {path!r}: expected number, 'auto' or null, got {value!r}")
    raise AssertionError(f"bad schema entry for {path}")


def _normalize(raw: dict, schema: dict = _SCHEMA, prefix: str = "") -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"config section {prefix or '<root>'} must be a mapping")
    out = {}
    for key, value in raw.items():
        if key not in schema:
            where = f"{prefix}{key}"
            raise ConfigError(f"unknown config key {where!r}")
    for key, spec in schema.items():
        path = f"{prefix}{key}"
        if isinstance(spec, dict):
            out[key] = _normalize(raw.get(key, {}), spec, prefix=f"{path}.")
        else:
            default, checker = spec
            value = raw.get(key, default)
            out[key] = None if value is None else _coerce(path, value, checker)
    return out


@dataclass
class ExperimentConfig:
    """A fully resolved experiment description (all defaults applied)."""

    values: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = _normalize(self.values)
        if self.values["T"] is None:
            raise ConfigError("config key 'T' is required")
        if self.values["T"] < 1:
            raise ConfigError("config key 'T' must be >= 1")

    # attribute access used by the harness
    @property
    def algorithm(self):
        return self.values["algorithm"]

    @property
    def T(self):
        return self.values["T"]

    @property
    def H(self):
        return self.values["H"]

    @property
    def seed(self):
        return self.values["seed"]

    @property
    def output(self):
        return self.values["output"]

    @property
    def gamma(self):
        return self.values["gamma"]

    @property
    def init(self):
        return self.values["init"]

    @property
    def bit_counting(self):
        return self.values["bit_counting"]

    @property
    def graph(self):
        return self.values["graph"]

    @property
    def objective(self):
        return self.values["objective"]

    @property
    def compression(self):
        return self.values["compression"]

    @property
    def lr(self):
        return self.values["lr"]

    @property
    def trigger(self):
        return self.values["trigger"]

    @property
    def oracle(self):
        return self.values["oracle"]

    @property
    def record_states(self):
        return self.values["flags"]["record_states"]

    @property
    def enforce_theorem_preconditions(self):
        return self.values["flags"]["enforce_theorem_preconditions"]

    @property
    def forced_initial_broadcast(self):
        return self.values["flags"]["forced_initial_broadcast"]

    def to_dict(self) -> dict:
        return copy.deepcopy(self.values)

    def with_overrides(self, sets: list[str]) -> "ExperimentConfig":
        values = self.to_dict()
        for item in sets:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            key, _, raw_val = item.partition("=")
            value = yaml.safe_load(raw_val) if raw_val != "" else None
            node = values
            parts = key.strip().split(".")
            for part in parts[:-1]:
                if not isinstance(node.get(part), dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[part]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return ExperimentConfig(values)


def parse_config(text: str) -> ExperimentConfig:
    raw = yaml.safe_load(text)
    if raw is None:
        raw = {}
    return ExperimentConfig(raw)


def render_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=False)


def load_config(path: str, sets: tuple[str, ...] = ()) -> ExperimentConfig:
    cfg = parse_config(Path(path).read_text())
    if sets:
        cfg = cfg.with_overrides(list(sets))
    return cfg


# ---------------------------------------------------------------------------
# subcommand bodies (library API; the click layer only maps them to the shell)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_AUDIT = 4


def cmd_run(config_path: str, sets: tuple[str, ...] = (), output: str | None = None) -> int:
    from .harness import RunResult, execute, write_run_dir

    cfg = load_config(config_path, sets)
    out_dir = output or cfg.output or "run_output"
    try:
        result = execute(cfg)
    except DivergenceError as err:
        if err.partial_log is not None:
            err.partial_log.config = cfg.to_dict()
            write_run_dir(out_dir, RunResult(log=err.partial_log, states=None, report=None))
        click.echo(f"diverged: {err}", err=True)
        return EXIT_DIVERGED
    write_run_dir(out_dir, result)
    summary = result.log.summary
    click.echo(
        f"wrote {out_dir}/run.csv ({summary['iterations']} rows, "
        f"{summary['total_bits']} bits, final loss {summary['final_train_loss']:.6g})"
    )
    if result.report is not None:
        click.echo(str(result.report))
        if not result.report.passed:
            return EXIT_AUDIT
    return EXIT_OK


def cmd_compare(run_dirs: tuple[str, ...], target: float, out: str | None = None) -> int:
    from .harness import RunLog, compare_bits_to_accuracy

    if len(run_dirs) < 2:
        raise ConfigError("compare needs at least two run directories")
    logs, fingerprints = {}, {}
    for run_dir in run_dirs:
        p = Path(run_dir)
        log = RunLog.read_csv(p / "run.csv")
        with open(p / "summary.json") as f:
            sidecar = json.load(f)
        cfg = sidecar.get("config") or {}
        name = f"{(cfg.get('algorithm') or '?')}:{p.name}"
        logs[name] = log
        fingerprints[name] = (
            json.dumps(cfg.get("objective"), sort_keys=True),
            (cfg.get("graph") or {}).get("n"),
            cfg.get("seed"),
        )
    if len(set(fingerprints.values())) > 1:
        raise ConfigError(
            "refusing to compare runs with different objectives/seeds: "
            + "; ".join(f"{k} -> {v}" for k, v in fingerprints.items())
        )
    table = compare_bits_to_accuracy(logs, target)
    lines = [f"{'run':40s} {'reached':8s} {'t':>8s} {'bits':>14s}"]
    for name, row in table.items():
        lines.append(
            f"{name:40s} {str(row['reached']):8s} "
            f"{row['t'] if row['t'] is not None else 'unreached':>8} "
            f"{row['bits'] if row['bits'] is not None else 'unreached':>14}"
        )
    click.echo("\n".join(lines))
    if out:
        with open(out, "w") as f:
            f.write("run,reached,t,bits\n")
            for name, row in table.items():
                f.write(
                    f"{name},{row['reached']},"
                    f"{row['t'] if row['t'] is not None else ''},"
                    f"{row['bits'] if row['bits'] is not None else ''}\n"
                )
    return EXIT_OK


def cmd_audit(run_dir: str) -> int:
    from .harness import AuditReport, CheckResult, audit, load_run_dir

    sidecar, states = load_run_dir(run_dir)
    constants = sidecar.get("constants") or {}
    algorithm = constants.get("algorithm")
    if states is None:
        if algorithm in ("vanilla", "centralized"):
            report = AuditReport(
                checks=[
                    CheckResult(name, False, True, f"not applicable to {algorithm} runs")
                    for name in (
                        "trigger_bound",
                        "average_preservation",
                        "replica_consistency",
                        "deviation_bound",
                    )
                ]
            )
            click.echo(str(report))
            return EXIT_OK
        raise ConfigError(
            f"{run_dir}/states.npz not found; re-run with flags.record_states=true"
        )
    report = audit(states, constants, measured_G=(sidecar.get("summary") or {}).get("measured_G"))
    click.echo(str(report))
    return EXIT_OK if report.passed else EXIT_AUDIT


def cmd_certify_omega(
    kinds: tuple[str, ...],
    dims: tuple[int, ...],
    trials: int,
    seed: int,
    k: int | None,
    s: int | None,
) -> int:
    import math

    from .compression import certify_omega, make_operator

    failed = False
    for d in dims:
        for kind in kinds:
            kk = ss = None
            if kind in ("top_k", "rand_k", "sign_top_k", "quant_top_k"):
                kk = k if k is not None else max(1, d // 8)
            if kind in ("stochastic_quant", "quant_top_k"):
                # default s keeps beta(d, s) < 1 so omega is well defined
                ss = s if s is not None else math.ceil(math.sqrt(d)) + 1
            op = make_operator(kind, k=kk, s=ss)
            report = certify_omega(op, d=d, trials=trials, rng_seed=seed)
            click.echo(str(report))
            failed = failed or not report.passed
    return EXIT_AUDIT if failed else EXIT_OK


def cmd_spectral(graph_kind: str, n: int, weights: str, omega: float) -> int:
    from .mixing_graph import build_complete, build_ring, consensus_params, spectral_info

    if graph_kind == "ring":
        mixing = build_ring(n, weights)
    elif graph_kind == "complete":
        mixing = build_complete(n)
    else:
        raise ConfigError(f"unknown graph kind {graph_kind!r}")
    info = spectral_info(mixing)
    click.echo(f"graph: {mixing.name}")
    click.echo(f"lambda2 = {info.lambda2:.12g}")
    click.echo(f"delta   = {info.delta:.12g}")
    click.echo(f"beta    = {info.beta:.12g}")
    if not info.connected:
        click.echo("graph is not connected; gamma/p undefined")
        return EXIT_CONFIG
    params = consensus_params(info, omega)
    click.echo(f"omega   = {omega:.12g}")
    click.echo(f"gamma   = {params.gamma:.12g}")
    click.echo(f"p       = {params.p:.12g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# click layer


@click.group()
def main():
    """Event-triggered compressed decentralized SGD simulator."""


def _exit(code: int):
    sys.exit(code)


def _guarded(fn, *args, **kwargs):
    try:
        _exit(fn(*args, **kwargs))
    except (ConfigError, ScheduleError) as err:
        click.echo(f"config error: {err}", err=True)
        _exit(EXIT_CONFIG)
    except FileNotFoundError as err:
        click.echo(f"config error: {err}", err=True)
        _exit(EXIT_CONFIG)
    except ValueError as err:
        click.echo(f"config error: {err}", err=True)
        _exit(EXIT_CONFIG)


@main.command("run")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--set", "sets", multiple=True, help="override config keys, e.g. --set lr.a=500")
@click.option("--output", default=None, help="output directory (overrides config)")
def run_command(config_path, sets, output):
    """Execute one experiment and write run.csv + summary.json (+ states.npz)."""
    _guarded(cmd_run, config_path, sets, output)


@main.command("compare")
@click.argument("run_dirs", nargs=-1, type=click.Path(exists=True, file_okay=False))
@click.option("--target", type=float, required=True, help="optimality-gap target")
@click.option("--out", default=None, help="also write the table as CSV")
def compare_command(run_dirs, target, out):
    """Bits-to-target table across finished runs of the same problem."""
    _guarded(cmd_compare, run_dirs, target, out)


@main.command("audit")
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
def audit_command(run_dir):
    """Check recorded states against the algorithm's invariants."""
    _guarded(cmd_audit, run_dir)


@main.command("certify-omega")
@click.option("--kind", "kinds", multiple=True, required=True,
              help="operator kind; repeatable")
@click.option("--d", "dims", multiple=True, type=int, required=True, help="dimension; repeatable")
@click.option("--trials", type=int, default=10000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--k", type=int, default=None, help="sparsifier k (default d//8)")
@click.option("--s", type=int, default=None, help="quantizer levels (default keeps beta < 1)")
def certify_command(kinds, dims, trials, seed, k, s):
    """Monte-Carlo check of the contraction inequality for chosen operators."""
    _guarded(cmd_certify_omega, kinds, dims, trials, seed, k, s)


@main.command("spectral")
@click.option("--graph", "graph_kind", default="ring", show_default=True)
@click.option("--n", type=int, default=8, show_default=True)
@click.option("--weights", default="uniform", show_default=True)
@click.option("--omega", type=float, default=1.0, show_default=True,
              help="compression quality used in the gamma formula")
def spectral_command(graph_kind, n, weights, omega):
    """Print delta, beta, gamma, p for a topology and compression quality."""
    _guarded(cmd_spectral, graph_kind, n, weights, omega)


if __name__ == "__main__":
    main()
