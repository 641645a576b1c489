"""Configuration-driven experiment runner.

Subcommands:

* ``simulate``  -- draw a dataset from the configured model and write it
  (CSV plus JSON sidecar) into the output directory.
* ``run``       -- run every configured method over replicated seeds,
  write raw per-replicate results and aggregated summaries.
* ``asymptotics`` -- emit the variance-versus-M curve of the
  independent-model analysis as CSV.
* ``selftest``  -- run the proper-weighting audit for every inner
  procedure and print one pass/fail line per check.

One experiment per JSON config file; a validated echo of the config is
written next to the results so every output directory is reproducible
from its own contents.  Exit codes: 0 success, 1 partial failure
(some replicate collapsed or a selftest check failed), 2 usage or
configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .asymptotics import variance_curve
from .diagnostics import aggregate, squared_error, write_summary_csv
from .exact import fapf_run, kalman_run
from .exceptions import NsmcError
from .model import (
    Dataset,
    IndependentSsmSpec,
    StssmSpec,
    load_dataset,
    make_model,
    save_dataset,
    simulate,
)
from .nested import (
    ExactTransitionProcedure,
    general_nsmc_step,
    make_procedure,
    nsmc_init,
    nsmc_run,
    proper_weighting_check,
)
from .smc import FilterOutput, bootstrap_pf


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the field."""


VALID_METHOD_KINDS = ("kalman", "fapf", "bpf", "nsmc", "nsmc-general")
VALID_INNER = ("smc+bs", "smc+empirical", "is", "self-nested")
_INNER_TO_PROC = {
    "smc+bs": "smc+bs",
    "smc+empirical": "smc+empirical",
    "is": "is",
    "self-nested": "self-nested",
}


@dataclass(frozen=True)
class MethodConfig:
    name: str
    kind: str
    N: int = 0
    M: int = 0
    inner: str = "smc+bs"
    stage_proposal: str = "prior"


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    model: StssmSpec | IndependentSsmSpec
    T: int
    data_seed: int
    data_path: str | None
    methods: tuple[MethodConfig, ...]
    replicates: int
    budget_matching: bool
    output_dir: str

    def echo_dict(self) -> dict:
        model: dict[str, object]
        if isinstance(self.model, StssmSpec):
            off = self.model.noise_precision.offdiag
            lam = float(-off[0]) if off.size else 0.0
            tau = float(self.model.noise_precision.diag[0]) - lam
            model = {
                "kind": "stssm",
                "n_x": self.model.n_x,
                "T": self.T,
                "tau": tau,
                "lambda": lam,
                "obs_var": self.model.obs_var,
                "a_coef": self.model.a_coef,
            }
        else:
            model = {
                "kind": "independent",
                "n_x": self.model.n_x,
                "T": self.T,
                "a_coef": self.model.a_coef,
                "init_mean": self.model.init_mean,
                "init_var": self.model.init_var,
                "trans_var": self.model.trans_var,
                "obs_var": self.model.obs_var,
            }
        data: dict[str, object] = {"seed": self.data_seed}
        if self.data_path is not None:
            data["path"] = self.data_path
        return {
            "name": self.name,
            "model": model,
            "data": data,
            "methods": [asdict(m) for m in self.methods],
            "replicates": self.replicates,
            "budget_matching": self.budget_matching,
            "output_dir": self.output_dir,
        }


def _require(block: dict, key: str, where: str):
    if key not in block:
        raise ConfigError(f"{where}.{key}: missing required field")
    return block[key]


def parse_config(raw: dict, base_name: str = "experiment") -> ExperimentConfig:
    """Validate a parsed JSON document into an :class:`ExperimentConfig`."""
    if not isinstance(raw, dict):
        raise ConfigError("top level: expected a JSON object")
    name = raw.get("name", base_name)
    mblock = _require(raw, "model", "model")
    kind = _require(mblock, "kind", "model")
    T = int(_require(mblock, "T", "model"))
    if T < 1:
        raise ConfigError("model.T: must be >= 1")
    try:
        if kind == "stssm":
            model: StssmSpec | IndependentSsmSpec = StssmSpec.chain(
                n_x=int(_require(mblock, "n_x", "model")),
                tau=float(_require(mblock, "tau", "model")),
                lam=float(_require(mblock, "lambda", "model")),
                obs_var=float(_require(mblock, "obs_var", "model")),
                a_coef=float(mblock.get("a_coef", 0.5)),
            )
        elif kind == "independent":
            model = IndependentSsmSpec(
                n_x=int(_require(mblock, "n_x", "model")),
                a_coef=float(mblock.get("a_coef", 0.5)),
                init_mean=float(mblock.get("init_mean", 0.0)),
                init_var=float(mblock.get("init_var", 1.0)),
                trans_var=float(mblock.get("trans_var", 1.0)),
                obs_var=float(_require(mblock, "obs_var", "model")),
            )
        else:
            raise ConfigError(f"model.kind: unknown kind {kind!r}")
    except ValueError as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(f"model: {err}") from None

    dblock = _require(raw, "data", "data")
    data_path = dblock.get("path")
    data_seed = int(dblock.get("seed", 0))
    if data_path is None and "seed" not in dblock:
        raise ConfigError("data: needs either a seed or a path")

    methods = []
    raw_methods = _require(raw, "methods", "methods")
    if not raw_methods:
        raise ConfigError("methods: at least one method is required")
    for i, m in enumerate(raw_methods):
        where = f"methods[{i}]"
        mk = _require(m, "kind", where)
        if mk not in VALID_METHOD_KINDS:
            raise ConfigError(f"{where}.kind: unknown kind {mk!r}")
        n = int(m.get("N", 0))
        mm = int(m.get("M", 0))
        inner = m.get("inner", "smc+bs")
        stage_proposal = m.get("stage_proposal", "prior")
        if inner not in VALID_INNER:
            raise ConfigError(f"{where}.inner: unknown inner procedure {inner!r}")
        if stage_proposal not in ("prior", "optimal"):
            raise ConfigError(
                f"{where}.stage_proposal: must be 'prior' or 'optimal'"
            )
        if mk != "kalman" and n < 1:
            raise ConfigError(f"{where}.N: must be >= 1 for kind {mk!r}")
        if mk == "nsmc":
            if mm < 1:
                raise ConfigError(f"{where}.M: must be >= 1 for nested methods")
            if inner == "self-nested" and mm < 2:
                raise ConfigError(f"{where}.M: self-nested needs M >= 2")
        methods.append(
            MethodConfig(
                name=m.get("name", f"{mk}-{i}"),
                kind=mk,
                N=n,
                M=mm,
                inner=inner,
                stage_proposal=stage_proposal,
            )
        )
    names = [m.name for m in methods]
    if len(set(names)) != len(names):
        raise ConfigError("methods: method names must be unique")

    replicates = int(raw.get("replicates", 1))
    if replicates < 1:
        raise ConfigError("replicates: must be >= 1")
    return ExperimentConfig(
        name=name,
        model=model,
        T=T,
        data_seed=data_seed,
        data_path=data_path,
        methods=tuple(methods),
        replicates=replicates,
        budget_matching=bool(raw.get("budget_matching", False)),
        output_dir=str(raw.get("output_dir", "out")),
    )


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as err:
            raise ConfigError(
                f"{path}: invalid JSON at line {err.lineno}, column {err.colno}: "
                f"{err.msg}"
            ) from None
    return parse_config(raw, base_name=Path(path).stem)


# ---------------------------------------------------------------------------
# Running methods
# ---------------------------------------------------------------------------


def _method_rng(config: ExperimentConfig, replicate: int, method_idx: int):
    ss = np.random.SeedSequence([config.data_seed, replicate, method_idx])
    return np.random.default_rng(ss)


def _run_method(
    method: MethodConfig,
    config: ExperimentConfig,
    model,
    data: Dataset,
    rng,
) -> FilterOutput:
    if method.kind == "kalman":
        if not isinstance(config.model, StssmSpec):
            raise ConfigError(
                f"methods: kalman requires the stssm model, got independent"
            )
        return kalman_run(config.model, data)
    if method.kind == "fapf":
        if not isinstance(config.model, StssmSpec):
            raise ConfigError("methods: fapf requires the stssm model")
        return fapf_run(config.model, data, method.N, rng)
    if method.kind == "bpf":
        n = method.N
        if config.budget_matching and method.M >= 1:
            n = method.N * method.M
        return bootstrap_pf(config.model, data, n, rng)
    if method.kind == "nsmc":
        proc = make_procedure(
            method.inner,
            method.M,
            **(
                {"stage_proposal": method.stage_proposal}
                if method.inner in ("smc+bs", "smc+empirical")
                else {}
            ),
        )
        return nsmc_run(config.model, data, method.N, method.M, proc, rng)
    # nsmc-general: the bootstrap-reduction configuration of the general
    # algorithm (transition proposal, unit multipliers, exact draws);
    # richer configurations are library-level.
    system = nsmc_init(model, method.N)
    means = np.empty((data.T, model.n_x))
    variances = np.empty((data.T, model.n_x))
    logz_inc = np.empty(data.T)
    prev = 0.0
    proc = ExactTransitionProcedure()
    for t in range(data.T):
        system = general_nsmc_step(
            system, model, proc, "transition", "one", data.observations[t], rng
        )
        probs = np.exp(system.logw - np.max(system.logw))
        probs = probs / probs.sum()
        means[t] = probs @ system.states
        variances[t] = probs @ (system.states - means[t]) ** 2
        logz_inc[t] = system.logZ - prev
        prev = system.logZ
    return FilterOutput(
        method=method.name,
        filter_means=means,
        filter_vars=variances,
        logz_increments=logz_inc,
    )


def _run_replicate(args) -> list[tuple]:
    """Worker: run every method for one replicate; returns result rows."""
    config, data, replicate = args
    model = make_model(config.model)
    rows = []
    for k, method in enumerate(config.methods):
        rng = _method_rng(config, replicate, k)
        try:
            out = _run_method(method, config, model, data, rng)
        except NsmcError as err:
            rows.append((replicate, method.name, "failed", "", "", str(err)))
            continue
        rows.append((replicate, method.name, "logZ", "", "", repr(out.logZ)))
        comps = sorted({1, out.n_x})
        for t in range(out.T):
            for d in comps:
                rows.append(
                    (
                        replicate,
                        method.name,
                        "mean",
                        t + 1,
                        d,
                        repr(float(out.filter_means[t, d - 1])),
                    )
                )
            if out.ess_trace is not None:
                rows.append(
                    (replicate, method.name, "ess", t + 1, "", repr(float(out.ess_trace[t])))
                )
    return rows


def run_experiment(config: ExperimentConfig, workers: int = 1) -> int:
    """Run all methods over all replicates; returns the exit status."""
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if config.data_path is not None:
        data, _ = load_dataset(config.data_path)
        if data.T != config.T or data.n_x != config.model.n_x:
            raise ConfigError("data.path: dataset does not match the model block")
    else:
        data = simulate(config.model, config.T, seed=config.data_seed)

    with open(out_dir / "config.echo.json", "w") as fh:
        json.dump(config.echo_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")

    jobs = [(config, data, r) for r in range(config.replicates)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_replicate, jobs))
    else:
        results = [_run_replicate(j) for j in jobs]

    rows = [row for rep_rows in results for row in rep_rows]
    rows.sort(key=lambda r: (r[0], r[1], r[2], str(r[3]), str(r[4])))
    with open(out_dir / "results.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["replicate", "method", "stat", "t", "component", "value"])
        writer.writerows(rows)

    failed = sum(1 for r in rows if r[2] == "failed")
    _write_summaries(config, data, rows, out_dir)
    return 1 if failed else 0


def _write_summaries(config, data, rows, out_dir):
    """Aggregate per-method statistics; squared errors use the exact
    filter as ground truth when it applies."""
    truth = None
    if isinstance(config.model, StssmSpec):
        truth = kalman_run(config.model, data)
    else:
        try:
            truth = kalman_run(config.model.to_stssm(), data)
        except ValueError:
            truth = None

    by_method: dict[str, dict[str, list]] = {}
    for rep, method, stat, t, comp, value in rows:
        if stat == "failed":
            continue
        rec = by_method.setdefault(method, {"logZ": [], "x1": [], "xn": []})
        if stat == "logZ":
            rec["logZ"].append(float(value))
        elif stat == "mean" and t == data.T:
            if comp == 1:
                rec["x1"].append(float(value))
            if comp == data.n_x:
                rec["xn"].append(float(value))

    summaries = {}
    for method, rec in sorted(by_method.items()):
        if rec["logZ"]:
            summaries[f"{method}:logZ"] = aggregate(np.array(rec["logZ"]))
        if truth is not None and rec["logZ"]:
            se = squared_error(np.array(rec["logZ"]), truth.logZ)
            summaries[f"{method}:se_logZ"] = aggregate(se)
        if truth is not None and rec["x1"]:
            se = squared_error(np.array(rec["x1"]), truth.filter_means[-1, 0])
            summaries[f"{method}:se_x_T_1"] = aggregate(se)
        if truth is not None and rec["xn"] and data.n_x > 1:
            se = squared_error(np.array(rec["xn"]), truth.filter_means[-1, -1])
            summaries[f"{method}:se_x_T_n"] = aggregate(se)
    write_summary_csv(summaries, config.name, out_dir / "summary.csv")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_simulate(config: ExperimentConfig, out_dir: Path, verbose: bool) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    data = simulate(config.model, config.T, seed=config.data_seed)
    path = out_dir / "dataset.csv"
    save_dataset(data, config.model, path)
    if verbose:
        print(f"wrote {path} and {path.with_suffix('.meta.json')}")
    return 0


def _cmd_run(config: ExperimentConfig, out_dir: Path, workers: int, verbose: bool) -> int:
    status = run_experiment(config, workers=workers)
    if verbose:
        print(f"experiment {config.name}: exit status {status}")
    return status


def _cmd_asymptotics(raw: dict, out_dir: Path, verbose: bool) -> int:
    block = raw.get("asymptotics")
    if block is None:
        raise ConfigError("asymptotics: missing 'asymptotics' block in config")
    spec = IndependentSsmSpec(
        n_x=int(block.get("n_x", 1)),
        a_coef=float(block.get("a_coef", 0.5)),
        init_mean=float(block.get("init_mean", 0.0)),
        init_var=float(block.get("init_var", 1.0)),
        trans_var=float(block.get("trans_var", 1.0)),
        obs_var=float(_require(block, "obs_var", "asymptotics")),
    )
    t = int(_require(block, "t", "asymptotics"))
    n_x = int(block.get("n_x", 1))
    m_grid = [int(m) for m in _require(block, "m_grid", "asymptotics")]
    if any(m < 2 for m in m_grid):
        raise ConfigError("asymptotics.m_grid: entries must be >= 2")
    ys = block.get("ys")
    ys_arr = None if ys is None else np.asarray(ys, dtype=float)
    curve = variance_curve(spec, t, n_x, m_grid, ys=ys_arr)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "variance_curve.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["M", "sigma_nsmc", "sigma_fa"])
        for m, s_nsmc, s_fa in curve:
            writer.writerow([m, repr(float(s_nsmc)), repr(float(s_fa))])
    if verbose:
        print(f"wrote {path}")
    return 0


def _cmd_selftest(n_reps: int, verbose: bool) -> int:
    spec = StssmSpec.chain(n_x=2, tau=1.0, lam=1.0, obs_var=0.25, a_coef=0.5)
    x_prev = np.array([0.3, -0.8])
    y_t = np.array([0.7, 0.1])
    rng = np.random.default_rng(20_240_001)
    failures = 0
    for kind in ("smc+bs", "smc+empirical", "is", "self-nested"):
        for m in (1, 5, 20):
            if kind == "self-nested" and m < 2:
                continue
            proc = make_procedure(kind, m)
            checks = proper_weighting_check(proc, spec, x_prev, y_t, n_reps, rng)
            worst = max(abs(z) for _, _, z in checks.values())
            ok = worst <= 3.0
            failures += 0 if ok else 1
            print(
                f"proper-weighting {kind:15s} M={m:<3d} "
                f"max|z|={worst:5.2f}  {'PASS' if ok else 'FAIL'}"
            )
    return 1 if failures else 0


def main(argv=None) -> int:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--verbose", action="store_true")
    parser = argparse.ArgumentParser(
        prog="nsmc",
        description="Nested sequential Monte Carlo experiment harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("simulate", "run", "asymptotics"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--out", default=None, help="override the output directory")
        if name == "run":
            p.add_argument("--workers", type=int, default=1)
    p = sub.add_parser("selftest", parents=[common])
    p.add_argument("--reps", type=int, default=20000)

    args = parser.parse_args(argv)
    try:
        if args.command == "selftest":
            return _cmd_selftest(args.reps, args.verbose)
        with open(args.config) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as err:
                raise ConfigError(
                    f"{args.config}: invalid JSON at line {err.lineno}, "
                    f"column {err.colno}: {err.msg}"
                ) from None
        if args.command == "asymptotics":
            out_dir = Path(args.out or raw.get("output_dir", "out"))
            return _cmd_asymptotics(raw, out_dir, args.verbose)
        config = parse_config(raw, base_name=Path(args.config).stem)
        if args.out is not None:
            config = ExperimentConfig(
                **{**config.__dict__, "output_dir": args.out}
            )
        if args.command == "simulate":
            return _cmd_simulate(config, Path(config.output_dir), args.verbose)
        return _cmd_run(config, Path(config.output_dir), getattr(args, "workers", 1), args.verbose)
    except (ConfigError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
