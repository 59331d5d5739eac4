"""Command line driver: YAML config in, JSON reports and CSV time series out.

    stabilab audit    --config run.yaml
    stabilab simulate --config run.yaml --out results --seed 3
    stabilab mc       --config run.yaml --paths 50

Exit codes: 0 success, 2 hypothesis audit failed, 3 design rejected,
4 blow-up (or non-convergent Picard solve) in a single-path run.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .closed_loop import BlowUpError, build_system, estimate_eta, picard_solve, run_monte_carlo, simulate, y_norm
from .kernel_semigroup import audit_kernel_decay, build_kernel
from .noise_model import (
    RNG_ALGORITHM, CoeffSpec, CoeffTerm, Coefficient, EnvelopeViolation,
    audit_noise_condition, audit_rescaled_decay, eval_coeffs, sample_path,
)
from .spectral_basis import RectDomain, ResolutionError, audit_eigen_bounds, audit_series, build_basis
from .stabilizer_design import DesignRejected, HypothesisError, assemble_design, audit_decay_margin, audit_simple_spectrum, gram_matrix, select_unstable

EXIT_OK, EXIT_HYPOTHESIS, EXIT_REJECTED, EXIT_BLOWUP = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- config

@dataclass
class DomainCfg:
    Lx: float = math.pi
    Ly: float = math.pi / math.sqrt(2.0)
    grid_nx: int | None = None
    grid_ny: int | None = None
    gamma1_edges: list = field(default_factory=lambda: ["bottom", "top", "left"])


@dataclass
class DesignCfg:
    J: int = 40
    c: float = 5.0
    rho: float = 2.0
    alpha: float = 0.1
    gammas: list | None = None
    require_margin: bool = False


@dataclass
class TermCfg:
    amplitude: float = 0.0
    exponent: float = 0.0
    wavenumbers: list | None = None


@dataclass
class CoefCfg:
    constant: float = 0.0
    wavenumbers: list | None = None
    terms: list = field(default_factory=list)


@dataclass
class CoeffCfg:
    a2: CoefCfg = field(default_factory=CoefCfg)
    a3: CoefCfg = field(default_factory=lambda: CoefCfg(constant=-1.0))
    C_a: float = 1.0


@dataclass
class NoiseCfg:
    theta: float = 0.5
    dt: float = 0.01
    T: float = 10.0
    seed: int = 0
    mc_paths: int = 50
    workers: int = 1


@dataclass
class SolverCfg:
    method: str = "etd"
    feedback: bool = True
    picard_max_iters: int = 50
    picard_tol: float = 1e-12
    eta_bisection: bool = False
    eta_bracket: list = field(default_factory=lambda: [1e-3, 100.0])
    kernel_quadrature: str = "gauss"
    kernel_refine: int = 4


@dataclass
class InitialCfg:
    amplitude: float = 1e-3
    support: str = "all"
    seed: int = 0
    modes: list | None = None


@dataclass
class AuditCfg:
    series_exponent: float = 5.0 / 3.0
    series_J_max: int = 1000
    series_domain: str = "square"
    eigen_stability_tol: float = 0.10
    kernel_trials: int = 20


@dataclass
class ExperimentConfig:
    domain: DomainCfg = field(default_factory=DomainCfg)
    design: DesignCfg = field(default_factory=DesignCfg)
    coeff: CoeffCfg = field(default_factory=CoeffCfg)
    noise: NoiseCfg = field(default_factory=NoiseCfg)
    solver: SolverCfg = field(default_factory=SolverCfg)
    initial: InitialCfg = field(default_factory=InitialCfg)
    audit: AuditCfg = field(default_factory=AuditCfg)
    out: str = "results"

    def validate(self):
        d, g, n, s, i = self.domain, self.design, self.noise, self.solver, self.initial
        checks = [
            (d.Lx > 0 and d.Ly > 0, "domain lengths must be positive"),
            (g.J >= 2, "design.J must be >= 2"),
            (g.rho > 1, "design.rho must exceed 1"),
            (g.alpha > 0, "design.alpha must be positive"),
            (n.theta >= 0, "noise.theta must be nonnegative"),
            (n.dt > 0 and n.T >= n.dt, "need noise.dt > 0 and noise.T >= noise.dt"),
            (n.mc_paths >= 1 and n.workers >= 1, "mc_paths and workers must be >= 1"),
            (s.method in ("etd", "picard"), "solver.method must be etd or picard"),
            (s.picard_tol > 0 and s.picard_max_iters >= 1, "picard_tol > 0 and picard_max_iters >= 1"),
            (s.kernel_quadrature in ("gauss", "trapezoid"), "kernel_quadrature must be gauss or trapezoid"),
            (len(s.eta_bracket) == 2 and 0 < s.eta_bracket[0] < s.eta_bracket[1], "bad eta_bracket"),
            (i.support in ("all", "unstable"), "initial.support must be all or unstable"),
            (i.amplitude >= 0 and math.isfinite(i.amplitude), "initial.amplitude must be finite and >= 0"),
            (self.coeff.C_a > 0, "coeff.C_a must be positive"),
            (self.audit.series_domain in ("square", "config"), "audit.series_domain must be square or config"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if i.modes is not None and (len(i.modes) != g.J or not all(math.isfinite(float(v)) for v in i.modes)):
            raise ConfigError(f"initial.modes must hold {g.J} finite numbers")
        return self


def _build(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        default = names[key].default_factory() if names[key].default_factory is not dataclasses.MISSING else names[key].default
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, f"{where}.{key}")
        elif key == "terms":
            kwargs[key] = [_build(TermCfg, v, f"{where}.terms") for v in value]
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where}.{key}: expected true/false")
            kwargs[key] = value
        elif isinstance(default, int) and not isinstance(default, bool) and value is not None:
            if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
                raise ConfigError(f"{where}.{key}: expected an integer")
            kwargs[key] = int(value)
        elif isinstance(default, float) and value is not None:
            try:
                kwargs[key] = float(value)
            except (TypeError, ValueError):
                raise ConfigError(f"{where}.{key}: expected a number") from None
        else:
            kwargs[key] = value
    return cls(**kwargs)


def load_config(path=None, overrides=None) -> ExperimentConfig:
    data = {}
    if path is not None:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    cfg = _build(ExperimentConfig, data, "config")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, name = key.partition(".")
        if name:
            setattr(getattr(cfg, section), name, value)
        else:
            setattr(cfg, section, value)
    return cfg.validate()


def _coefficient(c: CoefCfg) -> Coefficient:
    wn = lambda w: None if w is None else (int(w[0]), int(w[1]))
    return Coefficient(
        float(c.constant), wn(c.wavenumbers),
        tuple(CoeffTerm(float(t.amplitude), float(t.exponent), wn(t.wavenumbers)) for t in c.terms),
    )


def coeff_spec(cfg: ExperimentConfig) -> CoeffSpec:
    return CoeffSpec(_coefficient(cfg.coeff.a2), _coefficient(cfg.coeff.a3), cfg.coeff.C_a)


def make_basis(cfg: ExperimentConfig):
    d = cfg.domain
    dom = RectDomain.for_modes(d.Lx, d.Ly, cfg.design.J, tuple(d.gamma1_edges))
    if d.grid_nx is not None or d.grid_ny is not None:
        dom = RectDomain(d.Lx, d.Ly, d.grid_nx or dom.grid_nx, d.grid_ny or dom.grid_ny, tuple(d.gamma1_edges))
    return build_basis(dom, cfg.design.J)


def make_design(cfg: ExperimentConfig, basis=None):
    g = cfg.design
    basis = basis if basis is not None else make_basis(cfg)
    return assemble_design(basis, g.c, g.rho, g.alpha, g.gammas, g.require_margin)


def initial_modes(cfg: ExperimentConfig, N: int | None = None) -> np.ndarray:
    i = cfg.initial
    if i.modes is not None:
        return np.asarray(i.modes, float)
    J = cfg.design.J
    rng = np.random.default_rng(i.seed)
    y0 = np.zeros(J)
    m = J if i.support == "all" or N is None else N
    y0[:m] = rng.standard_normal(m)
    return y0 * (i.amplitude / np.linalg.norm(y0))


# ---------------------------------------------------------------- output

def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    return obj


def write_json(path: Path, obj):
    # float repr is the shortest round-trip decimal, so reruns are byte-identical
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


TRAJECTORY_COLUMNS = ["t", "y_l2", "y_half", "Y_l2", "weighted_Y_sq", "u_l2"]


def trajectory_rows(traj, alpha):
    stat = traj.stat(alpha)
    Yl2 = np.linalg.norm(traj.Y, axis=1)
    return zip(traj.t, traj.l2, traj.h_half, Yl2, stat, traj.u_norm)


def _decay_fit(t, v, t0=1.0):
    m = (t >= t0) & (v > 0)
    if m.sum() < 2:
        return math.nan
    return float(np.polyfit(t[m], np.log(v[m]), 1)[0])


def _report(cfg, command, **body):
    return {
        "command": command,
        "version": __version__,
        "rng": RNG_ALGORITHM,
        "config": {k: v for k, v in dataclasses.asdict(cfg).items() if k != "out"},
        **body,
    }


# ---------------------------------------------------------------- commands

def cmd_audit(cfg: ExperimentConfig, out: Path):
    basis = make_basis(cfg)
    g = cfg.design
    coeff = coeff_spec(cfg)
    res = {}
    if cfg.audit.series_domain == "square":
        sdom = RectDomain(math.pi, math.pi)
    else:
        sdom = basis.domain
    res["series"] = audit_series(sdom, cfg.audit.series_exponent, cfg.audit.series_J_max)
    res["eigen_bounds"] = (
        audit_eigen_bounds(basis, cfg.audit.eigen_stability_tol) if basis.J >= 20
        else {"ok": None, "skipped": "needs J >= 20"}
    )
    N, mu = select_unstable(basis, g.c, g.rho)
    res["decay_margin"] = audit_decay_margin(g.alpha, g.rho, N, basis.lambdas)
    res["simple_spectrum"] = audit_simple_spectrum(mu, N)
    try:
        _, rank = gram_matrix(basis, N)
        res["gram"] = {"ok": True, "rank": rank, "N": N}
    except DesignRejected as exc:
        res["gram"] = {"ok": False, "N": N, "message": str(exc)}
    res["noise_condition"] = audit_noise_condition(cfg.noise.theta, coeff)
    tg = np.linspace(0.0, cfg.noise.T, 21)
    X, Y = np.meshgrid(basis.x, basis.y, indexing="ij")
    try:
        for t in tg:
            eval_coeffs(coeff, float(t), X, Y, basis.domain.Lx, basis.domain.Ly)
        res["coefficient_envelope"] = {"ok": True}
    except EnvelopeViolation as exc:
        res["coefficient_envelope"] = {"ok": False, "message": str(exc)}
    path = sample_path(cfg.noise.seed, cfg.noise.theta, cfg.noise.dt, cfg.noise.T)
    res["rescaled_decay"] = audit_rescaled_decay(path, coeff)

    mandatory = ["simple_spectrum", "gram", "noise_condition", "coefficient_envelope", "series"] + (["decay_margin"] if g.require_margin else [])
    flags = {k: bool(res[k].get("ok", res[k].get("converged"))) for k in mandatory}
    if res["eigen_bounds"].get("ok") is not None:
        flags["eigen_bounds"] = bool(res["eigen_bounds"]["ok"])
    res["mandatory"] = flags
    res["ok"] = all(flags.values())
    write_json(out / "audit.json", _report(cfg, "audit", results=res))
    return (EXIT_OK if res["ok"] else EXIT_HYPOTHESIS), res


def cmd_design(cfg: ExperimentConfig, out: Path):
    d = make_design(cfg)
    b = d.basis
    E = d.coupling()
    rows = [
        (j + 1, int(b.kx[j]), int(b.ky[j]), float(b.lambdas[j]), float(d.mu[j]), int(j < d.N), float(np.linalg.norm(E[j])))
        for j in range(b.J)
    ]
    write_csv(out / "design_modes.csv", ["j", "kx", "ky", "lambda", "mu", "unstable", "coupling_norm"], rows)
    summary = d.summary()
    write_json(out / "design.json", _report(cfg, "design", design=summary))
    return EXIT_OK, summary


def cmd_kernel(cfg: ExperimentConfig, out: Path):
    d = make_design(cfg)
    n = cfg.noise
    t = np.arange(int(round(n.T / n.dt)) + 1) * n.dt
    k = build_kernel(d, t, cfg.solver.kernel_quadrature, cfg.solver.kernel_refine)
    aud = audit_kernel_decay(k, trials=cfg.audit.kernel_trials, seed=n.seed)
    rows = zip(t, np.linalg.norm(k.Q, axis=(1, 2), ord=2), np.abs(k.W_tail).max(axis=(1, 2)))
    write_csv(out / "kernel.csv", ["t", "Q_spectral_norm", "w_tail_max"], rows)
    write_json(out / "kernel.json", _report(cfg, "kernel", design={"N": d.N, "cond_sum": d.cond_sum}, audit=aud))
    return (EXIT_OK if aud["ok"] else EXIT_HYPOTHESIS), aud


def _system(cfg, d, feedback=None):
    n = cfg.noise
    fb = cfg.solver.feedback if feedback is None else feedback
    kernel = build_kernel(d, np.array([0.0, n.dt]), cfg.solver.kernel_quadrature, cfg.solver.kernel_refine) if fb else None
    return build_system(d, coeff_spec(cfg), n.dt, feedback=fb, kernel=kernel)


def cmd_simulate(cfg: ExperimentConfig, out: Path):
    d = make_design(cfg)
    n = cfg.noise
    system = _system(cfg, d)
    path = sample_path(n.seed, n.theta, n.dt, n.T)
    y0 = initial_modes(cfg, d.N)
    if cfg.solver.method == "picard":
        return _picard(cfg, out, d, system, path, y0, "simulate")
    traj = simulate(system, y0, path, raise_on_blowup=False)
    res = {
        "design": {"N": d.N, "cond_sum": d.cond_sum},
        "y_norm": dataclasses.asdict(y_norm(traj, d.alpha)),
        "decay_rate_fit": _decay_fit(traj.t, traj.l2),
        "blowup_time": traj.blowup_time,
        "final_l2": float(traj.l2[-1]),
    }
    write_csv(out / "trajectory.csv", TRAJECTORY_COLUMNS, trajectory_rows(traj, d.alpha))
    write_json(out / "simulate.json", _report(cfg, "simulate", results=res))
    return (EXIT_BLOWUP if traj.blowup_time is not None else EXIT_OK), res


def _picard(cfg, out, d, system, path, y0, name):
    s = cfg.solver
    r = picard_solve(system, y0, path, d.alpha, s.picard_max_iters, s.picard_tol)
    res = {
        "design": {"N": d.N, "cond_sum": d.cond_sum},
        "converged": r.converged,
        "iterations": r.iterations,
        "q_ratio": r.q_ratio,
        "iterate_distances": r.iterate_distances,
        "message": r.message,
    }
    if r.trajectory is not None:
        res["y_norm"] = dataclasses.asdict(y_norm(r.trajectory, d.alpha))
        try:
            etd = simulate(system, y0, path)
            res["etd_sup_l2_distance"] = float(np.max(np.linalg.norm(etd.y - r.trajectory.y, axis=1)))
        except BlowUpError as exc:
            res["etd_sup_l2_distance"] = math.inf
            res["etd_blowup_time"] = exc.t
        write_csv(out / "picard_trajectory.csv", TRAJECTORY_COLUMNS, trajectory_rows(r.trajectory, d.alpha))
    if s.eta_bisection:
        direction = y0 if np.linalg.norm(y0) > 0 else np.ones_like(y0)
        try:
            res["eta"] = estimate_eta(system, direction, path, d.alpha, *s.eta_bracket)
        except ValueError as exc:
            res["eta"] = {"error": str(exc)}
    write_json(out / f"{name}.json", _report(cfg, name, results=res))
    return (EXIT_OK if r.converged else EXIT_BLOWUP), res


def cmd_picard(cfg: ExperimentConfig, out: Path):
    d = make_design(cfg)
    n = cfg.noise
    system = _system(cfg, d)
    path = sample_path(n.seed, n.theta, n.dt, n.T)
    return _picard(cfg, out, d, system, path, initial_modes(cfg, d.N), "picard")


def cmd_mc(cfg: ExperimentConfig, out: Path):
    d = make_design(cfg)
    n = cfg.noise
    noise = audit_noise_condition(n.theta, coeff_spec(cfg))
    y0 = initial_modes(cfg, d.N)
    runs = {}
    for label, fb in (("feedback_on", True), ("feedback_off", False)):
        runs[label] = run_monte_carlo(_system(cfg, d, fb), y0, n.theta, n.T, d.alpha, n.mc_paths, n.seed, n.workers)
    header = ["path", "seed"]
    for label in runs:
        header += [f"{label}_sup_stat", f"{label}_growth", f"{label}_bounded", f"{label}_blowup_time"]
    rows = []
    for i in range(n.mc_paths):
        row = [i, runs["feedback_on"]["per_path"][i]["seed"]]
        for label in runs:
            p = runs[label]["per_path"][i]
            row += [p["sup_stat"], p["growth"], int(p["bounded"]), "" if p["blowup_time"] is None else p["blowup_time"]]
        rows.append(row)
    write_csv(out / "mc_paths.csv", header, rows)
    summary = {k: {kk: vv for kk, vv in v.items() if kk != "per_path"} for k, v in runs.items()}
    write_json(out / "mc.json", _report(cfg, "mc", noise_condition=noise, results=runs))
    return (EXIT_OK if noise["ok"] else EXIT_HYPOTHESIS), summary


COMMANDS = {
    "audit": cmd_audit,
    "design": cmd_design,
    "kernel": cmd_kernel,
    "simulate": cmd_simulate,
    "picard": cmd_picard,
    "mc": cmd_mc,
}


def build_parser():
    p = argparse.ArgumentParser(prog="stabilab", description="Boundary-feedback stabilization experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, help="YAML experiment config (defaults used if omitted)")
        s.add_argument("--out", type=Path, help="output directory (overrides config 'out')")
        s.add_argument("--seed", type=int, help="noise seed (overrides noise.seed)")
        s.add_argument("--paths", type=int, help="Monte Carlo paths (overrides noise.mc_paths)")
        s.add_argument("--quiet", action="store_true", help="suppress the summary on stdout")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, {"noise.seed": args.seed, "noise.mc_paths": args.paths,
                                        "out": None if args.out is None else str(args.out)})
    except (ConfigError, OSError, yaml.YAMLError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        code, summary = COMMANDS[args.command](cfg, out)
    except (DesignRejected, ResolutionError) as exc:
        print(f"design rejected: {exc}", file=sys.stderr)
        return EXIT_REJECTED
    except HypothesisError as exc:
        print(f"hypothesis failed: {exc}", file=sys.stderr)
        return EXIT_HYPOTHESIS
    except BlowUpError as exc:
        print(f"blow-up: {exc}", file=sys.stderr)
        return EXIT_BLOWUP
    except ValueError as exc:
        print(f"invalid parameters: {exc}", file=sys.stderr)
        return EXIT_HYPOTHESIS
    # wall-clock goes to a sidecar so the reports themselves stay reproducible
    write_json(out / f"{args.command}.timings.json", {"command": args.command, "seconds": time.perf_counter() - t0})
    if not args.quiet:
        print(json.dumps(_clean(summary), indent=2, sort_keys=True))
    return code


if __name__ == "__main__":
    raise SystemExit(main())
