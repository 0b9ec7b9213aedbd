"""``lagstop`` command line: solve, sweep, oracle and validate.

Every command writes its outputs plus a ``manifest.json`` into the output
directory (``--out``, else ``$LAGSTOP_OUTPUT_DIR``, else ``./lagstop-out``).
The manifest holds the full run config, the seed, package versions and a
SHA-256 of each output, and carries no timestamps, so identical configs give
byte-identical files.  ``--threads`` only changes speed.

Exit codes: 0 success, 2 bad configuration, 3 numerical or runtime failure
(including a failed validation check).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import platform
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .analysis import SolverConfig, SweepAborted, sweep
from .errors import InvalidArgument, LagstopError
from .features import FEATURES, BasisSpec
from .obstacle import bind, shiryaev_spec
from .oracle import oracle_solve
from .paths import DEFAULT_WALK_CAP, enumerate_walk, make_grid
from .solver import solve_problem
from .validation import ValidationSettings, run_suite

__all__ = ["RunConfig", "main", "build_parser", "SCHEMA_VERSION"]

SCHEMA_VERSION = 1
OUTPUT_ENV = "LAGSTOP_OUTPUT_DIR"
COMMANDS = ("solve", "sweep", "oracle", "validate")


@dataclass(frozen=True)
class RunConfig:
    """Parameters of one CLI run; ``threads`` and ``output_dir`` never affect results."""

    command: str
    horizon: float = 1.0
    epsilon: float | None = None
    eps_grid: tuple[float, ...] | None = None
    n_steps: int = 500
    n_paths: int = 200_000
    policy_paths: int | None = None
    seed: int = 7
    basis: BasisSpec = field(default_factory=BasisSpec)
    path_kind: str = "brownian"
    lag_steps: tuple[int, ...] | None = None
    delta: float | None = None
    walk_cap: int = DEFAULT_WALK_CAP
    output_dir: str | None = None
    threads: int = 1
    schema_version: int = SCHEMA_VERSION

    def validate(self) -> "RunConfig":
        """Check every numeric field before any work starts; returns ``self``."""
        if self.schema_version != SCHEMA_VERSION:
            raise InvalidArgument(f"unsupported config schema {self.schema_version}")
        if self.command not in COMMANDS:
            raise InvalidArgument(f"unknown command {self.command!r}")
        if not (np.isfinite(self.horizon) and self.horizon > 0):
            raise InvalidArgument(f"T must be positive, got {self.horizon!r}")
        if self.n_steps < 1:
            raise InvalidArgument(f"steps must be >= 1, got {self.n_steps}")
        if self.n_paths < 2:
            raise InvalidArgument(f"paths must be >= 2, got {self.n_paths}")
        if self.policy_paths is not None and self.policy_paths < 0:
            raise InvalidArgument("policy-paths must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise InvalidArgument(f"seed must fit in 64 bits, got {self.seed}")
        if self.threads < 1:
            raise InvalidArgument("threads must be >= 1")
        if self.path_kind not in ("brownian", "walk"):
            raise InvalidArgument(f"unknown path kind {self.path_kind!r}")
        if self.delta is not None and not self.delta > 0:
            raise InvalidArgument("delta must be positive")
        grid = make_grid(self.horizon, self.n_steps)
        if self.command == "solve":
            if self.epsilon is None:
                raise InvalidArgument("solve needs --eps")
            bind(shiryaev_spec(self.epsilon, self.horizon), grid)
        elif self.command == "sweep":
            for e in self.eps_grid or ():
                bind(shiryaev_spec(e, self.horizon), grid)
            if not self.eps_grid:
                raise InvalidArgument("sweep needs a non-empty epsilon grid")
        elif self.command == "oracle":
            if self.n_steps > self.walk_cap:
                enumerate_walk(self.n_steps, 1.0, self.walk_cap)
            for m in self.lag_steps or ():
                if not 0 <= m <= self.n_steps:
                    raise InvalidArgument(f"lag steps {m} outside [0, {self.n_steps}]")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["basis"] = self.basis.to_dict()
        for key in ("eps_grid", "lag_steps"):
            if d[key] is not None:
                d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgument(f"unknown config keys {sorted(unknown)}")
        d = dict(d)
        if "basis" in d:
            d["basis"] = BasisSpec.from_dict(d["basis"])
        for key in ("eps_grid", "lag_steps"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidArgument(f"malformed config: {exc}") from exc

    def to_json(self) -> str:
        return _dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise InvalidArgument(f"config is not valid JSON: {exc}") from exc

    def reproducible_dict(self) -> dict:
        """Config fields that determine the outputs (no thread count or directory)."""
        d = self.to_dict()
        d.pop("threads")
        d.pop("output_dir")
        return d


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _versions() -> dict:
    return {
        "lagstop": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }


def _output_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir or os.environ.get(OUTPUT_ENV) or "lagstop-out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_outputs(cfg: RunConfig, files: dict[str, str]) -> Path:
    out = _output_dir(cfg)
    for name, text in files.items():
        (out / name).write_text(text)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "command": cfg.command,
        "seed": cfg.seed,
        "config": cfg.reproducible_dict(),
        "versions": _versions(),
        "outputs": {name: hashlib.sha256(text.encode()).hexdigest() for name, text in sorted(files.items())},
    }
    (out / "manifest.json").write_text(_dumps(manifest))
    return out


def cmd_solve(cfg: RunConfig) -> int:
    grid = make_grid(cfg.horizon, cfg.n_steps)
    sol = solve_problem(
        shiryaev_spec(cfg.epsilon, cfg.horizon),
        grid,
        cfg.n_paths,
        cfg.seed,
        basis=cfg.basis,
        policy_paths=cfg.policy_paths,
        kind=cfg.path_kind,
        threads=cfg.threads,
    )
    summary = sol.summary()
    out = _write_outputs(cfg, {"summary.json": _dumps(summary)})
    vp, se = summary["value_policy"], summary["stderr"]
    if vp is None:
        print(f"value_insample = {summary['value_insample']:.6f} +/- {summary['stderr_insample']:.6f}")
    else:
        print(f"value_policy = {vp:.6f} +/- {se:.6f}  (in-sample {summary['value_insample']:.6f})")
    print(f"wrote {out / 'summary.json'}")
    return 0


def cmd_sweep(cfg: RunConfig) -> int:
    sc = SolverConfig(cfg.n_steps, cfg.n_paths, cfg.policy_paths, cfg.seed, cfg.basis, cfg.threads)
    try:
        res = sweep(cfg.horizon, cfg.eps_grid, sc)
    except SweepAborted as exc:
        _write_outputs(cfg, {"sweep.csv": exc.partial.to_csv(), "sweep.json": exc.partial.to_json() + "\n"})
        raise
    out = _write_outputs(cfg, {"sweep.csv": res.to_csv(), "sweep.json": res.to_json() + "\n"})
    for r in res.rows:
        cf = "" if r.closed_form is None else f"  closed form {r.closed_form:.5f}"
        print(f"eps={r.epsilon:.4f}  v={r.value_policy:.5f} +/- {r.stderr:.5f}  [{r.lower:.5f}, {r.upper:.5f}]{cf}")
    print(f"max adjacent jump {res.max_adjacent_jump:.5f}; wrote {out / 'sweep.csv'}")
    return 0


def cmd_oracle(cfg: RunConfig) -> int:
    n = cfg.n_steps
    grid = make_grid(cfg.horizon, n)
    delta = float(np.sqrt(grid.dt)) if cfg.delta is None else cfg.delta
    tree = enumerate_walk(n, delta, cfg.walk_cap)
    lags = cfg.lag_steps if cfg.lag_steps is not None else tuple(range(n + 1))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epsilon", "n_steps", "value"])
    for m in lags:
        eps = m * grid.dt
        res = oracle_solve(tree, bind(shiryaev_spec(eps, cfg.horizon), grid))
        w.writerow([repr(eps), n, repr(res.value_at_floor)])
        print(f"eps={eps:.6g} (lag {m} steps)  value={res.value_at_floor!r}")
    out = _write_outputs(cfg, {"oracle.csv": buf.getvalue()})
    print(f"wrote {out / 'oracle.csv'}")
    return 0


def cmd_validate(cfg: RunConfig, inject_nan: bool = False) -> int:
    settings = ValidationSettings(cfg.horizon, cfg.n_steps, cfg.n_paths, cfg.seed, cfg.threads, inject_nan)
    results = run_suite(settings)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    report = {"passed": not failed, "failed": failed, "checks": [r.to_dict() for r in results]}
    _write_outputs(cfg, {"validate.json": _dumps(report)})
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 3 if failed else 0


def _csv_floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers: {text!r}") from exc


def _csv_ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers: {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lagstop", description="Optimal stopping with lagged payoffs.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON; explicit flags override its fields")
    common.add_argument("--T", dest="horizon", type=float, help="horizon (default 1)")
    common.add_argument("--steps", dest="n_steps", type=int, help="grid steps")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="worker cap; results do not depend on it")
    common.add_argument("--out", dest="output_dir", help=f"output directory (default ${OUTPUT_ENV} or ./lagstop-out)")

    mc = argparse.ArgumentParser(add_help=False)
    mc.add_argument("--paths", dest="n_paths", type=int, help="regression paths")
    mc.add_argument("--policy-paths", dest="policy_paths", type=int, help="fresh paths for the policy value")
    mc.add_argument("--degree", type=int, help="basis polynomial degree (default 3)")
    mc.add_argument("--features", help=f"comma-separated basis features from {','.join(FEATURES)}")

    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("solve", parents=[common, mc], help="solve one lagged-Brownian problem")
    s.add_argument("--eps", dest="epsilon", type=float)
    s.add_argument("--kind", dest="path_kind", choices=["brownian", "walk"])

    w = sub.add_parser("sweep", parents=[common, mc], help="solve over a grid of eps")
    g = w.add_mutually_exclusive_group()
    g.add_argument("--eps-grid", dest="eps_grid", type=_csv_floats, help="comma-separated eps values")
    g.add_argument("--points", type=int, help="evenly spaced eps in [0, T] (default 21)")

    o = sub.add_parser("oracle", parents=[common], help="exact values on the random-walk tree")
    o.add_argument("--lag-steps", dest="lag_steps", type=_csv_ints, help="comma-separated lags in steps (default all)")
    o.add_argument("--delta", type=float, help="walk step (default sqrt(T/steps))")
    o.add_argument("--cap", dest="walk_cap", type=int, help=f"max enumeration depth (default {DEFAULT_WALK_CAP})")

    v = sub.add_parser("validate", parents=[common, mc], help="run the invariant suite")
    v.add_argument("--inject-nan", action="store_true", help="test fixture: corrupt the obstacle with a NaN")
    return p


_DEFAULTS = {
    "validate": {"n_steps": 100, "n_paths": 20_000},
    "oracle": {"n_steps": 16},
}


def config_from_args(args: argparse.Namespace) -> RunConfig:
    if args.config:
        try:
            base = RunConfig.from_json(Path(args.config).read_text())
        except OSError as exc:
            raise InvalidArgument(f"cannot read config: {exc}") from exc
        if base.command != args.command:
            base = replace(base, command=args.command)
    else:
        base = RunConfig(args.command, **_DEFAULTS.get(args.command, {}))
    updates = {}
    for f in fields(RunConfig):
        val = getattr(args, f.name, None)
        if val is not None and f.name not in ("command", "basis"):
            updates[f.name] = val
    if getattr(args, "degree", None) is not None or getattr(args, "features", None):
        feats = tuple(args.features.split(",")) if getattr(args, "features", None) else base.basis.features
        deg = args.degree if args.degree is not None else base.basis.degree
        updates["basis"] = BasisSpec(feats, deg, base.basis.cross_terms)
    cfg = replace(base, **updates)
    if cfg.command == "sweep" and cfg.eps_grid is None:
        pts = getattr(args, "points", None) or 21
        if pts < 2:
            raise InvalidArgument("--points must be >= 2")
        cfg = replace(cfg, eps_grid=tuple(float(x) for x in np.linspace(0.0, cfg.horizon, pts)))
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args).validate()
        if cfg.command == "solve":
            return cmd_solve(cfg)
        if cfg.command == "sweep":
            return cmd_sweep(cfg)
        if cfg.command == "oracle":
            return cmd_oracle(cfg)
        return cmd_validate(cfg, inject_nan=args.inject_nan)
    except LagstopError as exc:
        print(f"lagstop: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except MemoryError:
        print("lagstop: error: out of memory; reduce --paths or --steps", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
