"""``flashlab`` command line: check, gradcheck, rmse, bench, simulate.

Settings come from built-in defaults, then an optional JSON config file
(``--config``), then explicit flags. Reports go to ``--out-dir``, which defaults
to ``$FLASHLAB_OUT`` or the current directory. Exit status: 0 success,
1 tolerance breach or failed simulation, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, dataclass, fields

from . import __version__
from .dense import is_power_of_two, make_rng
from .experiments import (
    RMSE_METHODS,
    bench_rows,
    check_forward,
    gradcheck_instance,
    median_rows,
    random_check_cases,
    rmse_experiment,
)
from .sim import (
    PRESETS,
    DeadlockError,
    ResourceModel,
    SimShape,
    load_resource_model,
    simulate,
    simulate_backward,
    validate_trace,
    work_model,
)

SCHEMA_VERSION = 1
EXIT_OK, EXIT_BREACH, EXIT_CONFIG = 0, 1, 2

FWD_TOL = 1e-12
GRAD_REF_TOL = 1e-11
GRAD_FD_TOL = 1e-6


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    seqlen: int = 256
    headdim: int = 64
    heads: int = 1
    batch: int = 1
    causal: bool = False
    seed: int = 0
    trials: int = 1
    cases: int = 20
    format: str = "fp16"
    block_rows: int = 64
    block_cols: int = 64
    schedule: str = "full"
    stages: int = 2
    resource_model: str | None = None
    trace: bool = False
    backward: bool = False
    corrupt_lse: bool = False
    out_dir: str = "."

    def validate(self) -> "ExperimentConfig":
        for name in ("seqlen", "headdim", "heads", "batch", "trials", "cases", "block_rows", "block_cols", "stages"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive count, got {getattr(self, name)}")
        if self.format not in ("fp16", "fp8"):
            raise ConfigError(f"format must be fp16 or fp8, got {self.format!r}")
        if self.schedule not in PRESETS and self.schedule != "ablation":
            raise ConfigError(f"schedule must be one of {sorted(PRESETS) + ['ablation']}, got {self.schedule!r}")
        return self


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(name: str, value):
    kind = _FIELD_TYPES[name]
    if value is None:
        return None
    try:
        if kind == "bool":
            if isinstance(value, str):
                return value.lower() in ("1", "true", "yes")
            return bool(value)
        if kind == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError
            return int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot interpret {value!r} as {kind}") from None
    return value


# per-command defaults layered over the dataclass defaults
COMMAND_DEFAULTS = {
    "rmse": {"seqlen": 8192, "headdim": 128, "block_rows": 128, "block_cols": 128, "trials": 10},
    "simulate": {"seqlen": 8192, "headdim": 128, "block_rows": 128, "block_cols": 128},
    "bench": {"seqlen": 512, "headdim": 64, "heads": 32},
}


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    values = dict(COMMAND_DEFAULTS.get(getattr(args, "command", None), {}))
    out_env = os.environ.get("FLASHLAB_OUT")
    if out_env:
        values["out_dir"] = out_env
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"config: cannot read {args.config}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config: top level must be a JSON object")
        for key, value in doc.items():
            if key == "schema":
                continue
            if key not in _FIELD_TYPES:
                raise ConfigError(f"config: unknown field {key!r}")
            values[key] = _coerce(key, value)
    for key in _FIELD_TYPES:
        value = getattr(args, key, None)
        if value is not None:
            values[key] = value
    return ExperimentConfig(**values).validate()


# ------------------------------------------------------------------ output


def _schema(cmd: str) -> str:
    return f"flashlab.{cmd}/{SCHEMA_VERSION}"


def _out_path(cfg: ExperimentConfig, name: str) -> str:
    os.makedirs(cfg.out_dir, exist_ok=True)
    return os.path.join(cfg.out_dir, name)


def write_csv(cfg: ExperimentConfig, cmd: str, rows: list[dict], name: str | None = None) -> str:
    path = _out_path(cfg, name or f"{cmd}.csv")
    keys = ["schema"]
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({"schema": _schema(cmd), **{k: _fmt(v) for k, v in r.items()}})
    return path


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_json(cfg: ExperimentConfig, cmd: str, doc: dict) -> str:
    path = _out_path(cfg, f"{cmd}.json")
    with open(path, "w") as fh:
        json.dump({"schema": _schema(cmd), **doc}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _config_doc(cfg: ExperimentConfig) -> dict:
    doc = asdict(cfg)
    doc.pop("out_dir")
    return doc


# ---------------------------------------------------------------- commands


def cmd_check(cfg: ExperimentConfig) -> int:
    """Forward schedules against the FP64 reference on random configurations."""
    rows = [check_forward(case) for case in random_check_cases(cfg.cases, cfg.seed, max_seqlen=cfg.seqlen)]
    breaches = [r for r in rows if not r["max_err"] <= FWD_TOL]
    write_csv(cfg, "check", rows)
    summary = {
        "cases": len(rows),
        "tolerance": FWD_TOL,
        "max_err": max(r["max_err"] for r in rows),
        "breaches": len(breaches),
        "skipped_blocks": sum(r["skipped_blocks"] for r in rows),
        "config": _config_doc(cfg),
    }
    write_json(cfg, "check", summary)
    print(f"check: {len(rows)} cases, max error {summary['max_err']:.3e}, "
          f"{summary['skipped_blocks']} causal blocks skipped, {len(breaches)} breaches")
    return EXIT_BREACH if breaches else EXIT_OK


def cmd_gradcheck(cfg: ExperimentConfig) -> int:
    """Flash backward against the reference backward and central differences."""
    rng = make_rng(cfg.seed)  # only picks instance shapes
    rows = []
    for t in range(cfg.cases):
        n = int(rng.integers(1, min(cfg.seqlen, 16) + 1))
        d = int(rng.integers(1, min(cfg.headdim, 8) + 1))
        row = gradcheck_instance(cfg.seed * 1000 + t, n, d, block=max(1, min(cfg.block_rows, 4)),
                                 causal=cfg.causal, corrupt_lse=cfg.corrupt_lse)
        row["ok"] = row["ref_err"] <= GRAD_REF_TOL and row["fd_err"] <= GRAD_FD_TOL
        rows.append(row)
    write_csv(cfg, "gradcheck", rows)
    bad = sum(not r["ok"] for r in rows)
    write_json(cfg, "gradcheck", {
        "instances": len(rows),
        "failures": bad,
        "max_ref_err": max(r["ref_err"] for r in rows),
        "max_fd_err": max(r["fd_err"] for r in rows),
        "config": _config_doc(cfg),
    })
    print(f"gradcheck: {len(rows)} instances, {bad} failures")
    return EXIT_BREACH if bad else EXIT_OK


def cmd_rmse(cfg: ExperimentConfig) -> int:
    """RMSE of the low-precision paths against FP64 on the outlier distribution."""
    if not is_power_of_two(cfg.headdim):
        raise ConfigError(f"headdim must be a power of two for incoherent processing, got {cfg.headdim}")
    rows = rmse_experiment(cfg.trials, cfg.seed, seqlen=cfg.seqlen, headdim=cfg.headdim, block=cfg.block_rows)
    med = median_rows(rows, RMSE_METHODS)
    table = [{"row": "trial", **r} for r in rows]
    table.append({"row": "median", "seed": "", "seqlen": cfg.seqlen, "headdim": cfg.headdim, **med})
    write_csv(cfg, "rmse", table)
    for k in RMSE_METHODS:
        print(f"{k:>20s}  median RMSE {med[k]:.3e}")
    return EXIT_OK


def cmd_bench(cfg: ExperimentConfig) -> int:
    """FLOPs accounting plus wall-clock of this (emulated, not hardware) implementation."""
    rows = bench_rows(cfg.seqlen, cfg.headdim, cfg.heads, cfg.batch, cfg.causal, cfg.seed, block=cfg.block_rows)
    write_csv(cfg, "bench", rows)
    for r in rows:
        print(f"{r['direction']:>8s}  FLOPs {r['flops']:,}  emulation {r['emulation_flops_per_s']:.3e} FLOP/s")
    return EXIT_OK


def _resource_model(cfg: ExperimentConfig) -> ResourceModel:
    base = load_resource_model(cfg.resource_model) if cfg.resource_model else ResourceModel()
    return ResourceModel(**{**asdict(base), "stages": cfg.stages})


def cmd_simulate(cfg: ExperimentConfig) -> int:
    """Pipeline simulation for one preset or the three-row ablation."""
    try:
        model = _resource_model(cfg)
    except (OSError, ValueError, TypeError) as exc:
        raise ConfigError(f"resource_model: {exc}") from None
    shape = SimShape(cfg.seqlen, cfg.headdim, cfg.block_rows, cfg.block_cols)
    names = ["full", "ws-only", "overlap-only"] if cfg.schedule == "ablation" else [cfg.schedule]
    fmt = "fp8" if cfg.format == "fp8" else "fp16"
    wm = work_model(cfg.seqlen, cfg.headdim, fmt, model)
    runs = {}
    status = EXIT_OK
    for name in names:
        kind = PRESETS[name].with_fp8(cfg.format == "fp8")
        try:
            rep = (simulate_backward if cfg.backward else simulate)(shape, model, kind)
        except DeadlockError as exc:
            runs[name] = {"deadlock": True, "blocking_edge": list(exc.edge), "edges": [list(e) for e in exc.edges]}
            print(f"simulate {name}: {exc}")
            status = EXIT_BREACH
            continue
        violations = validate_trace(rep)
        doc = rep.to_dict()
        doc["violations"] = violations
        runs[name] = doc
        if violations:
            status = EXIT_BREACH
            print(f"simulate {name}: {len(violations)} trace violations")
            continue
        if cfg.trace:
            write_csv(cfg, "trace", [e._asdict() for e in rep.trace], name=f"trace_{name}.csv")
        print(f"simulate {name}: makespan {rep.makespan:.1f} cycles, "
              f"tensor utilization {rep.utilization['tensor']:.3f}")
    write_json(cfg, "simulate", {
        "matmul_flops_per_exp": wm.matmul_flops_per_exp,
        "softmax_cycle_fraction": wm.softmax_cycle_fraction,
        "exp_share_of_total": wm.exp_share_of_total,
        "resource_model": model.to_dict(),
        "runs": runs,
        "config": _config_doc(cfg),
    })
    return status


COMMANDS = {
    "check": cmd_check,
    "gradcheck": cmd_gradcheck,
    "rmse": cmd_rmse,
    "bench": cmd_bench,
    "simulate": cmd_simulate,
}


def _bool_flag(p, name, help_):
    g = p.add_mutually_exclusive_group()
    g.add_argument(f"--{name}", dest=name.replace("-", "_"), action="store_const", const=True, help=help_)
    g.add_argument(f"--no-{name}", dest=name.replace("-", "_"), action="store_const", const=False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flashlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"flashlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__.splitlines()[0])
        p.add_argument("--config", help="JSON file with ExperimentConfig fields")
        p.add_argument("--out-dir", dest="out_dir")
        p.add_argument("--seed", type=int)
        p.add_argument("--seqlen", type=int)
        p.add_argument("--headdim", type=int)
        p.add_argument("--block-rows", dest="block_rows", type=int)
        p.add_argument("--block-cols", dest="block_cols", type=int)
        _bool_flag(p, "causal", "causal masking")
        if name in ("check", "gradcheck"):
            p.add_argument("--cases", type=int, help="number of random cases / instances")
        if name == "gradcheck":
            p.add_argument("--corrupt-lse", dest="corrupt_lse", action="store_const", const=True,
                           help="shift L before the backward pass (negative test)")
        if name == "rmse":
            p.add_argument("--trials", type=int)
        if name == "bench":
            p.add_argument("--heads", type=int)
            p.add_argument("--batch", type=int)
        if name == "simulate":
            p.add_argument("--schedule", help=f"one of {sorted(PRESETS)} or 'ablation'")
            p.add_argument("--stages", type=int)
            p.add_argument("--format", choices=["fp16", "fp8"])
            p.add_argument("--resource-model", dest="resource_model")
            p.add_argument("--trace", action="store_const", const=True, help="also write per-event CSV traces")
            p.add_argument("--backward", action="store_const", const=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = build_config(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"flashlab {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
