"""Command-line front end.

    backward-mfg validate --config cfg.json --mode game
    backward-mfg riccati  --config cfg.json --out run/ --svg
    backward-mfg simulate --config cfg.json --seed 7 --out run/
    backward-mfg sweep    --config cfg.json --Ns 10,30,100,300,1000 --out run/
    backward-mfg reproduce-paper --out run/

Exit codes: 0 success, 1 the model or computation failed a domain check,
2 bad usage or an unreadable config.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import artifacts as art
from .model import DimensionError, ModelParams, TimeGrid, reference_example, validate
from .pathsim import PHAT_VARIANTS, Synthesis, ValidationFailed, simulate_population, synthesize
from .riccati import METHODS, BlowUpError, SingularityError, UnsupportedConfiguration, build_riccatis
from .verify import convergence_sweep, decoupling_residual, fbsde_residual, stationarity_residual

DEFAULT_NS = (10, 30, 100, 300, 1000)
REPRODUCE_STEPS = 1000


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    model: ModelParams
    steps: int = 1000
    mode: str = "game"
    seed: int = 0
    replications: int = 1
    integrator: str = "rk4"
    phat_variant: str = "derived"
    emit_svg: bool = False
    paths: int = 200
    Ns: tuple[int, ...] = DEFAULT_NS
    output_dir: Path = field(default=Path("."))

    def __post_init__(self) -> None:
        if self.steps < 10:
            raise ConfigError("steps must be at least 10")
        if self.replications < 1:
            raise ConfigError("replications must be at least 1")
        if self.paths < 1:
            raise ConfigError("paths must be at least 1")
        if self.mode not in ("game", "social"):
            raise ConfigError("mode must be 'game' or 'social'")
        if self.integrator not in METHODS:
            raise ConfigError(f"integrator must be one of {METHODS}")
        if self.phat_variant not in PHAT_VARIANTS:
            raise ConfigError(f"phat variant must be one of {PHAT_VARIANTS}")

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.model.T, self.steps)

    def settings(self) -> dict[str, Any]:
        """Flag values recorded in the manifest (thread count deliberately excluded)."""
        return {
            "steps": self.steps, "mode": self.mode, "seed": self.seed,
            "replications": self.replications, "integrator": self.integrator,
            "phat_variant": self.phat_variant, "emit_svg": self.emit_svg,
            "paths": self.paths, "Ns": list(self.Ns),
        }


_RUN_KEYS = {"steps", "mode", "seed", "replications", "integrator", "phat_variant", "emit_svg", "paths", "Ns"}


def parse_config(raw: bytes, overrides: Optional[dict[str, Any]] = None) -> RunConfig:
    """Build a RunConfig from JSON bytes; command-line overrides win over the file."""
    try:
        doc = json.loads(raw)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    if "model" in doc:
        model_doc = doc["model"]
        run = {k: v for k, v in doc.items() if k != "model"}
    else:
        run = {k: doc[k] for k in _RUN_KEYS & doc.keys()}
        model_doc = {k: v for k, v in doc.items() if k not in _RUN_KEYS}
    unknown = set(run) - _RUN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    run.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if not isinstance(model_doc, dict):
        raise ConfigError("'model' must be a JSON object")
    try:
        model = ModelParams.from_mapping(model_doc)
    except (DimensionError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model: {exc}") from None
    try:
        if "Ns" in run:
            run["Ns"] = tuple(int(N) for N in run["Ns"])
        for key in ("steps", "seed", "replications", "paths"):
            if key in run:
                run[key] = int(run[key])
        return RunConfig(model=model, **run)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid run settings: {exc}") from None


def reproduce_config(steps: int = REPRODUCE_STEPS, seed: int = 0) -> tuple[RunConfig, bytes]:
    model = reference_example()
    doc = {"model": model.to_mapping(), "steps": steps, "mode": "game", "seed": seed, "integrator": "euler", "emit_svg": True}
    raw = json.dumps(doc, sort_keys=True).encode()
    return parse_config(raw), raw


# -- writers ---------------------------------------------------------------


def write_riccati(out: Path, syn_or_bundle, svg: bool) -> list[Path]:
    b = getattr(syn_or_bundle, "bundle", syn_or_bundle)
    n = b.params.n
    names = ("Sigma", "K", "Pi", "M")
    header = ["t"] + [c for name in names for c in art.matrix_columns(name, n, n)]
    paths_ = [getattr(b, name).values.reshape(len(b.grid), -1) for name in names]
    table = np.concatenate(paths_, axis=1)
    files = [art.write_csv(out / "riccati.csv", header, ([t, *row] for t, row in zip(b.grid.nodes, table.tolist())))]
    if svg:
        series = [(f"{name}_{i}{j}", getattr(b, name).values[:, i, j]) for name in names for i in range(n) for j in range(n)]
        files.append(art.svg_plot(out / "riccati.svg", b.grid.nodes, series, "Riccati solutions"))
    return files


def write_bsde(out: Path, syn: Synthesis) -> list[Path]:
    n = syn.params.n
    header = (["t"] + art.vector_columns("a", n) + art.vector_columns("b", n)
              + art.vector_columns("Ezeta", n) + art.vector_columns("Ex", n))
    table = np.concatenate([syn.phi.a.values, syn.phi.b.values, syn.Ezeta.values, syn.Ex.values], axis=1)
    return [art.write_csv(out / "bsde.csv", header, ([t, *row] for t, row in zip(syn.grid.nodes, table.tolist())))]


def write_paths(out: Path, ensembles: Sequence) -> Path:
    ens0 = ensembles[0]
    n, r = ens0.params.n, ens0.params.r
    header = (["agent", "t", "W"] + art.vector_columns("phi", n) + art.vector_columns("zeta", n)
              + art.vector_columns("phat", n) + art.vector_columns("x", n) + art.vector_columns("z", n)
              + art.vector_columns("u", r))
    t = ens0.grid.nodes

    def rows():
        for ens in ensembles:
            for j, k in enumerate(ens.agent_ids.tolist()):
                block = np.concatenate(
                    [ens.W[j][:, None], ens.phi[j], ens.zeta[j], ens.phat[j], ens.x[j], ens.z[j], ens.u[j]], axis=1
                )
                for i, row in enumerate(block.tolist()):
                    yield [k, float(t[i]), *row]

    return art.write_csv(out / "paths.csv", header, rows())


def write_costs(out: Path, ensembles: Sequence) -> Path:
    rows = [[int(k), float(J)] for ens in ensembles for k, J in zip(ens.agent_ids.tolist(), ens.costs.J)]
    rows.append(["J_soc", float(np.mean([ens.costs.J_soc for ens in ensembles]))])
    return art.write_csv(out / "costs.csv", ["agent", "J_k"], rows)


def write_summary(out: Path, ensembles: Sequence) -> Path:
    dec = [decoupling_residual(e) for e in ensembles]
    res = [fbsde_residual(e) for e in ensembles]
    p = ensembles[0].params
    rows = [
        ["decoupling_sup", max(d.sup for d in dec)],
        ["decoupling_relative", max(d.relative for d in dec)],
        ["fbsde_rms", max(s.rms for s in res)],
        ["fbsde_defect_rms", max(s.defect_rms for s in res)],
        ["stationarity_sup", max(stationarity_residual(e.agent(j), p) for e in ensembles for j in range(e.size))],
        ["terminal_max_error", max(float(np.abs(e.x[:, -1] - e.xi).max()) for e in ensembles)],
        ["J_soc_mean", float(np.mean([e.costs.J_soc for e in ensembles]))],
    ]
    return art.write_csv(out / "summary.csv", ["metric", "value"], rows)


def agent_figures(out: Path, ensembles: Sequence) -> list[Path]:
    ens = ensembles[0]
    t = ens.grid.nodes
    figs = []
    for key, label, fname in (("zeta", "zeta", "zeta.svg"), ("x", "state x", "state.svg"), ("u", "control u", "control.svg")):
        arr = getattr(ens, key)
        series = [(f"{label} {int(k)}", arr[j, :, 0]) for j, k in enumerate(ens.agent_ids.tolist())]
        figs.append(art.svg_plot(out / fname, t, series, f"{label} for each agent"))
    return figs


# -- commands --------------------------------------------------------------


def cmd_validate(cfg: RunConfig, raw: bytes, workers: int) -> int:
    report = validate(cfg.model, cfg.mode)
    print(f"mode: {cfg.mode}")
    print(report.format())
    return 0 if report.passed else 1


def _require_valid(cfg: RunConfig) -> None:
    report = validate(cfg.model, cfg.mode)
    if not report.passed:
        raise ValidationFailed(report)


def cmd_riccati(cfg: RunConfig, raw: bytes, workers: int) -> int:
    _require_valid(cfg)
    out = _outdir(cfg)
    bundle = build_riccatis(cfg.model, cfg.grid, cfg.mode, cfg.integrator)
    files = write_riccati(out, bundle, cfg.emit_svg)
    art.write_manifest(out, "riccati", raw, cfg.settings(), files)
    print(f"wrote {len(files)} file(s) to {out}")
    return 0


def _simulate(cfg: RunConfig, workers: int) -> tuple[Synthesis, list]:
    syn = synthesize(cfg.model, cfg.mode, cfg.grid, cfg.integrator, cfg.phat_variant)
    ensembles = [
        simulate_population(cfg.model, cfg.mode, cfg.seed, cfg.grid, workers=workers, replication=r, synthesis=syn)
        for r in range(cfg.replications)
    ]
    return syn, ensembles


def cmd_simulate(cfg: RunConfig, raw: bytes, workers: int) -> int:
    out = _outdir(cfg)
    syn, ensembles = _simulate(cfg, workers)
    files = write_riccati(out, syn, cfg.emit_svg) + write_bsde(out, syn)
    files += [write_paths(out, ensembles), write_costs(out, ensembles), write_summary(out, ensembles)]
    if cfg.emit_svg:
        files += agent_figures(out, ensembles)
    art.write_manifest(out, "simulate", raw, cfg.settings(), files)
    J = np.mean([e.costs.J_soc for e in ensembles])
    print(f"simulated {cfg.model.N} agents x {cfg.replications} replication(s); J_soc = {J:.6g}")
    return 0


def cmd_sweep(cfg: RunConfig, raw: bytes, workers: int) -> int:
    report = validate(cfg.model, "social")
    if not report.passed:
        raise ValidationFailed(report)
    out = _outdir(cfg)
    rep = convergence_sweep(cfg.model, cfg.Ns, cfg.grid, paths=cfg.paths, seed=cfg.seed,
                            method=cfg.integrator, workers=workers)
    files = [art.write_csv(out / "sweep.csv", ["N", "metric_name", "value"], rep.rows())]
    art.write_manifest(out, "sweep", raw, cfg.settings(), files)
    for name, fit in rep.fits.items():
        print(f"{name:10s} slope {fit.slope:+.4f}  intercept {fit.intercept:+.4f}  R2 {fit.r2:.6f}")
    return 0


def cmd_reproduce(cfg: RunConfig, raw: bytes, workers: int) -> int:
    out = _outdir(cfg)
    syn, ensembles = _simulate(cfg, workers)
    files = write_riccati(out, syn, svg=True) + write_bsde(out, syn) + agent_figures(out, ensembles)
    files += [write_paths(out, ensembles), write_costs(out, ensembles), write_summary(out, ensembles)]
    art.write_manifest(out, "reproduce-paper", raw, cfg.settings(), files)
    print(f"Pi(0) = {syn.bundle.Pi[0][0, 0]:.6f}; wrote {len(files)} artifacts to {out}")
    return 0


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


COMMANDS = {
    "validate": cmd_validate,
    "riccati": cmd_riccati,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "reproduce-paper": cmd_reproduce,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="backward-mfg",
        description="Decentralised strategies for LQ backward mean-field games and social optima.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        if name != "reproduce-paper":
            sp.add_argument("--config", required=True, type=Path, help="JSON configuration file")
        sp.add_argument("--mode", choices=("game", "social"))
        sp.add_argument("--seed", type=int)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--svg", action="store_true", default=None, help="also emit SVG figures")
        sp.add_argument("--integrator", choices=METHODS)
        sp.add_argument("--phat-variant", choices=PHAT_VARIANTS)
        sp.add_argument("--replications", type=int)
        sp.add_argument("--paths", type=int, help="Monte-Carlo paths per population size (sweep)")
        sp.add_argument("--Ns", type=lambda s: tuple(int(v) for v in s.split(",")), help="comma-separated sizes")
        sp.add_argument("--workers", type=int, default=1, help="threads; never changes the output")
        sp.add_argument("--out", type=Path, default=Path("."))
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {
        "mode": args.mode, "seed": args.seed, "steps": args.steps, "emit_svg": args.svg,
        "integrator": args.integrator, "phat_variant": args.phat_variant,
        "replications": args.replications, "paths": args.paths, "Ns": args.Ns,
    }
    try:
        if args.command == "reproduce-paper":
            cfg, raw = reproduce_config(args.steps or REPRODUCE_STEPS, args.seed or 0)
            kept = ("integrator", "phat_variant", "replications")
            cfg = replace(cfg, **{k: overrides[k] for k in kept if overrides[k] is not None})
        else:
            try:
                raw = args.config.read_bytes()
            except OSError as exc:
                raise ConfigError(f"cannot read config: {exc}") from None
            cfg = parse_config(raw, overrides)
        cfg = replace(cfg, output_dir=args.out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](cfg, raw, max(1, args.workers))
    except ValidationFailed as exc:
        print(exc, file=sys.stderr)
        return 1
    except (BlowUpError, SingularityError, UnsupportedConfiguration, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
