"""Rescaled closed-loop cubic equation in mode space.

State y(t) holds the modes of the rescaled field, Y(t) = Gamma(t) y(t) those
of the stochastic one.  The forcing is

    P_i(t) = int (Gamma a2 y^2 + Gamma^2 a3 y^3) phi_i,

evaluated pseudospectrally on a padded grid.  Two solvers are provided: an
exponential midpoint stepper and Picard iteration of the mild-solution map.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .kernel_semigroup import KernelRep, exact_operator, integrated_operator, semigroup_operator
from .noise_model import CoeffSpec, NoisePath, child_seed, coefficient_field, sample_path
from .spectral_basis import SpectralBasis, fractional_norms
from .stabilizer_design import StabilizerDesign

BLOWUP_LEVEL = 1e12
BOUND_KEYS = (
    "quad_l2", "quad_weighted", "quad_l2_lam", "quad_weighted_lam",
    "cubic_l2", "cubic_weighted", "cubic_l2_lam", "cubic_weighted_lam",
)


class BlowUpError(FloatingPointError):
    def __init__(self, t, msg="solution blew up"):
        super().__init__(f"{msg} at t={t:.6g}")
        self.t = float(t)


class NonlinearTerm:
    """Projection of Gamma a2 y^2 + Gamma^2 a3 y^3 onto all modes on a padded grid."""

    def __init__(self, basis: SpectralBasis, coeff: CoeffSpec, factor: int = 2):
        kq = max(coeff.a2.max_wavenumbers[0], coeff.a3.max_wavenumbers[0])
        lq = max(coeff.a2.max_wavenumbers[1], coeff.a3.max_wavenumbers[1])
        extra = 2 * max(kq, lq)
        x, y, w, phi = basis.padded_grid(factor, extra)
        self.basis = basis
        self.coeff = coeff
        X, Y = np.meshgrid(x, y, indexing="ij")
        self.X, self.Y = X.ravel(), Y.ravel()
        self.w = w
        self.phi = phi
        self.wphi = phi * w[:, None]
        self._const2 = self._constant_field(coeff.a2)
        self._const3 = self._constant_field(coeff.a3)

    def _constant_field(self, coef):
        if coef.terms:
            return None
        return coefficient_field(coef, 0.0, self.X, self.Y, self.basis.domain.Lx, self.basis.domain.Ly)

    def fields(self, t):
        d = self.basis.domain
        a2 = self._const2 if self._const2 is not None else coefficient_field(self.coeff.a2, t, self.X, self.Y, d.Lx, d.Ly)
        a3 = self._const3 if self._const3 is not None else coefficient_field(self.coeff.a3, t, self.X, self.Y, d.Lx, d.Ly)
        return a2, a3

    def __call__(self, y, t, gamma):
        """Modes P(t) for one state (J,) or a stack (n, J) sharing scalar or per-row t, gamma."""
        y = np.asarray(y, float)
        with np.errstate(over="ignore", invalid="ignore"):
            return self._evaluate(y, t, gamma)

    def _evaluate(self, y, t, gamma):
        v = y @ self.phi.T
        if not np.all(np.isfinite(v)):
            raise BlowUpError(np.max(t) if np.ndim(t) else t, "non-finite field")
        gamma = np.asarray(gamma, float)
        a2, a3 = self.fields(float(t) if np.ndim(t) == 0 else np.asarray(t, float)[:, None])
        g = gamma[..., None] if gamma.ndim else gamma
        v2 = v * v
        f = np.zeros_like(v)
        if not self.coeff.a2.is_zero:
            f += (g * a2) * v2
        if not self.coeff.a3.is_zero:
            f += (g * g * a3) * (v2 * v)
        out = f @ self.wphi
        if not np.all(np.isfinite(out)):
            raise BlowUpError(np.max(t) if np.ndim(t) else t, "non-finite forcing")
        return out


def nonlinear_modes(basis: SpectralBasis, y, a2, a3, gamma: float, factor: int = 2) -> np.ndarray:
    """Modes of gamma a2 y^2 + gamma^2 a3 y^3 for constant or callable a2(X, Y), a3(X, Y)."""
    x, yy, w, phi = basis.padded_grid(factor)
    X, Y = np.meshgrid(x, yy, indexing="ij")
    X, Y = X.ravel(), Y.ravel()
    f2 = a2(X, Y) if callable(a2) else a2
    f3 = a3(X, Y) if callable(a3) else a3
    with np.errstate(over="ignore", invalid="ignore"):
        v = phi @ np.asarray(y, float)
        f = gamma * f2 * v**2 + gamma**2 * f3 * v**3
    if not np.all(np.isfinite(f)):
        raise BlowUpError(0.0, "non-finite field")
    return phi.T @ (w * f)


@dataclass(frozen=True)
class Propagator:
    """Linear step data: S(h), int_0^h S and the same at h/2."""

    dt: float
    S: np.ndarray = field(repr=False)
    Phi: np.ndarray = field(repr=False)
    S_half: np.ndarray = field(repr=False)
    Phi_half: np.ndarray = field(repr=False)
    feedback: bool = True


def closed_loop_propagator(design: StabilizerDesign, dt: float, kernel: KernelRep | None = None) -> Propagator:
    """Propagator of the feedback semigroup; S(dt) is read from the kernel when given."""
    if kernel is not None:
        if not np.any(np.isclose(kernel.t, dt, rtol=0, atol=1e-12)):
            raise ValueError(f"dt={dt} is not a sample of the kernel grid")
        S = semigroup_operator(kernel, dt)
    else:
        S = exact_operator(design, dt)
    return Propagator(
        dt, S, integrated_operator(design, dt), exact_operator(design, 0.5 * dt),
        integrated_operator(design, 0.5 * dt), True,
    )


def _phi1(mu, h):
    small = np.abs(mu * h) < 1e-8
    safe = np.where(small, 1.0, mu)
    return np.where(small, h * (1 - 0.5 * mu * h), (1 - np.exp(-safe * h)) / safe)


def open_loop_propagator(mu, dt: float) -> Propagator:
    """u = 0: every mode decays (or grows) at its own rate -mu_j."""
    mu = np.asarray(mu, float)
    return Propagator(
        dt, np.diag(np.exp(-mu * dt)), np.diag(_phi1(mu, dt)),
        np.diag(np.exp(-mu * dt / 2)), np.diag(_phi1(mu, dt / 2)), False,
    )


@dataclass
class ClosedLoopSystem:
    basis: SpectralBasis
    design: StabilizerDesign | None
    coeff: CoeffSpec
    prop: Propagator
    nonlinear: NonlinearTerm

    @property
    def dt(self) -> float:
        return self.prop.dt

    @property
    def feedback(self) -> bool:
        return self.prop.feedback

    def feedback_norms(self, Y):
        """|u|_{L2(Gamma_1)} for a stack of mode vectors."""
        if not self.feedback or self.design is None:
            return np.zeros(len(Y))
        d = self.design
        Tsum = d.T.sum(axis=0)                       # (N, n_trace)
        u = (np.asarray(Y)[:, : d.N] @ d.A.T) @ Tsum
        return np.sqrt(np.sum(d.basis.trace_weights * u**2, axis=1))


def build_system(design: StabilizerDesign, coeff: CoeffSpec, dt: float, feedback: bool = True,
                 kernel: KernelRep | None = None) -> ClosedLoopSystem:
    basis = design.basis
    prop = closed_loop_propagator(design, dt, kernel) if feedback else open_loop_propagator(design.mu, dt)
    return ClosedLoopSystem(basis, design, coeff, prop, NonlinearTerm(basis, coeff))


@dataclass
class Trajectory:
    t: np.ndarray
    y: np.ndarray                 # (n_t, J)
    Gamma: np.ndarray
    Y: np.ndarray                 # Gamma * y, row by row
    l2: np.ndarray
    h_half: np.ndarray
    u_norm: np.ndarray
    blowup_time: float | None = None

    @classmethod
    def from_states(cls, system: ClosedLoopSystem, t, y, Gamma, blowup_time=None):
        y = np.asarray(y, float)
        Gamma = np.asarray(Gamma, float)
        return cls(
            t=np.asarray(t, float), y=y, Gamma=Gamma, Y=Gamma[:, None] * y,
            l2=np.linalg.norm(y, axis=1), h_half=fractional_norms(system.basis.lambdas, y, 0.5),
            u_norm=system.feedback_norms(y), blowup_time=blowup_time,
        )

    def stat(self, alpha):
        """exp(alpha t) |Y(t)|_2^2."""
        return np.exp(alpha * self.t) * np.sum(self.Y**2, axis=1)


def step_etd(y, t: float, system: ClosedLoopSystem, path: NoisePath) -> np.ndarray:
    """Exponential midpoint step: forcing frozen at t + dt/2 from an exponential-Euler predictor."""
    p = system.prop
    P0 = system.nonlinear(y, t, path.gamma_at(t))
    y_half = p.S_half @ y + p.Phi_half @ P0
    tm = t + 0.5 * p.dt
    Pm = system.nonlinear(y_half, tm, path.gamma_at(tm))
    y_new = p.S @ y + p.Phi @ Pm
    if not np.all(np.isfinite(y_new)) or np.max(np.abs(y_new)) > BLOWUP_LEVEL:
        raise BlowUpError(t + p.dt)
    return y_new


def _check_path(system, path):
    if not math.isclose(path.dt, system.dt, rel_tol=1e-12):
        raise ValueError(f"noise path step {path.dt} differs from solver step {system.dt}")


def simulate(system: ClosedLoopSystem, y0, path: NoisePath, raise_on_blowup: bool = True) -> Trajectory:
    """March step_etd over the path's time grid."""
    _check_path(system, path)
    y = np.asarray(y0, float).copy()
    if y.shape != (system.basis.J,) or not np.all(np.isfinite(y)):
        raise ValueError("initial modes must be a finite vector of length J")
    out = np.empty((len(path.t), len(y)))
    out[0] = y
    blow = None
    for n in range(len(path.t) - 1):
        try:
            y = step_etd(y, path.t[n], system, path)
        except BlowUpError as exc:
            if raise_on_blowup:
                raise
            blow = exc.t
            out = out[: n + 1]
            break
        out[n + 1] = y
    m = len(out)
    return Trajectory.from_states(system, path.t[:m], out, path.Gamma[:m], blow)


@dataclass
class YNormReport:
    y_norm: float
    argmax_t: float
    sup_l2_part: float
    sup_half_part: float


def y_norm(traj: Trajectory, alpha: float) -> YNormReport:
    """Discrete sup_t exp(alpha t) (|y|_2 + t^(1/12) ||y||_(1/2))."""
    return _ynorm_arrays(traj.t, traj.l2, traj.h_half, alpha)


def _ynorm_arrays(t, l2, hh, alpha):
    e = np.exp(alpha * t)
    a = e * l2
    b = e * t ** (1.0 / 12.0) * hh
    v = a + b
    k = int(np.argmax(v))
    return YNormReport(float(v[k]), float(t[k]), float(a.max()), float(b.max()))


def _ydist(basis, t, Y, alpha):
    return _ynorm_arrays(t, np.linalg.norm(Y, axis=1), fractional_norms(basis.lambdas, Y, 0.5), alpha).y_norm


def picard_map(system: ClosedLoopSystem, y0, ytraj, path: NoisePath) -> np.ndarray:
    """Discrete mild-solution map: z_{m+1} = S z_m + Phi P(t_{m+1/2}, (y_m + y_{m+1})/2)."""
    t = path.t
    tm = 0.5 * (t[:-1] + t[1:])
    ym = 0.5 * (ytraj[:-1] + ytraj[1:])
    gm = path.gamma_at(tm)
    P = system.nonlinear(ym, tm, gm)
    forced = P @ system.prop.Phi.T
    S = system.prop.S
    z = np.empty_like(ytraj)
    z[0] = y0
    with np.errstate(over="ignore", invalid="ignore"):
        for m in range(len(t) - 1):
            z[m + 1] = S @ z[m] + forced[m]
    bad = ~np.all(np.isfinite(z) & (np.abs(z) <= BLOWUP_LEVEL), axis=1)
    if bad.any():
        raise BlowUpError(t[int(np.argmax(bad))])
    return z


@dataclass
class PicardResult:
    trajectory: Trajectory | None
    iterate_distances: list
    q_ratio: float
    converged: bool
    iterations: int
    message: str = ""


def picard_solve(system: ClosedLoopSystem, y0, path: NoisePath, alpha: float,
                 max_iters: int = 50, tol: float = 1e-12, eta: float | None = None) -> PicardResult:
    """Iterate the mild-solution map from the zero trajectory until successive
    iterates are within ``tol`` in the weighted sup norm.

    q_ratio is the median ratio of successive iterate distances; q_ratio >= 1
    (or a blow-up of the iterates) means the map is not contracting.
    """
    _check_path(system, path)
    y0 = np.asarray(y0, float)
    if eta is not None and np.linalg.norm(y0) > eta:
        raise ValueError(f"|y0|_2 = {np.linalg.norm(y0)} exceeds eta = {eta}")
    cur = np.zeros((len(path.t), len(y0)))
    dists = []
    ratios = []
    for it in range(1, max_iters + 1):
        try:
            new = picard_map(system, y0, cur, path)
        except BlowUpError as exc:
            return PicardResult(None, dists, math.inf, False, it, f"iterates diverged: {exc}")
        d = _ydist(system.basis, path.t, new - cur, alpha)
        dists.append(d)
        if len(dists) >= 2 and dists[-2] > 0:
            ratios.append(dists[-1] / dists[-2])
        cur = new
        if d < tol:
            q = float(np.median(ratios)) if ratios else 0.0
            traj = Trajectory.from_states(system, path.t, cur, path.Gamma)
            return PicardResult(traj, dists, q, q < 1.0, it)
    q = float(np.median(ratios)) if ratios else math.inf
    return PicardResult(None, dists, q, False, max_iters, "iteration cap reached")


def estimate_eta(system: ClosedLoopSystem, direction, path: NoisePath, alpha: float,
                 lo: float = 1e-3, hi: float = 1e3, steps: int = 20, max_iters: int = 12) -> dict:
    """Bisection (in log amplitude) on the onset of Picard non-contraction along ``direction``.

    An amplitude counts as contracting when the iterates stay bounded and the
    median ratio of successive distances is below 1 within ``max_iters``
    iterations; full convergence is not required for the decision.
    """
    direction = np.asarray(direction, float)
    direction = direction / np.linalg.norm(direction)

    def q_at(a):
        r = picard_solve(system, a * direction, path, alpha, max_iters=max_iters, tol=1e-13 * a)
        return r.q_ratio

    q_lo, q_hi = q_at(lo), q_at(hi)
    if not q_lo < 1.0 or q_hi < 1.0:
        raise ValueError(f"bracket [{lo}, {hi}] does not straddle the contraction onset")
    for _ in range(steps):
        mid = math.sqrt(lo * hi)
        q = q_at(mid)
        if q < 1.0:
            lo, q_lo = mid, q
        else:
            hi, q_hi = mid, q
    return {"eta_lower": lo, "eta_upper": hi, "q_at_lower": q_lo, "q_at_upper": q_hi}


def _path_stats(traj: Trajectory, alpha: float, T: float) -> dict:
    stat = traj.stat(alpha)
    half = traj.t <= 0.5 * T + 1e-12
    first = float(stat[half].max())
    total = float(stat.max())
    finished = traj.blowup_time is None
    return {
        "sup_stat": total,
        "sup_first_half": first,
        "stat_initial": float(stat[0]),
        "stat_final": float(stat[-1]),
        "growth": total / float(stat[0]) if stat[0] > 0 else math.inf,
        "bounded": bool(finished and total <= first),
        "blowup_time": traj.blowup_time,
    }


def _mc_worker(args):
    system, y0, base_seed, index, theta, T, alpha = args
    seed = child_seed(base_seed, index)
    path = sample_path(seed, theta, system.dt, T)
    traj = simulate(system, y0, path, raise_on_blowup=False)
    out = _path_stats(traj, alpha, T)
    out.update(path=index, seed=seed)
    return out


def run_monte_carlo(system: ClosedLoopSystem, y0, theta: float, T: float, alpha: float,
                    paths: int, base_seed: int = 0, workers: int = 1) -> dict:
    """Per-path sup_t exp(alpha t)|Y(t)|^2 over independent noise paths.

    A path counts as bounded when the running sup does not grow over the
    second half of the horizon.  Path i uses seed child_seed(base_seed, i).
    """
    if paths < 1:
        raise ValueError("paths must be >= 1")
    jobs = [(system, np.asarray(y0, float), base_seed, i, theta, T, alpha) for i in range(paths)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            per = list(ex.map(_mc_worker, jobs))
    else:
        per = [_mc_worker(j) for j in jobs]
    sup = np.array([p["sup_stat"] for p in per])
    growth = np.array([p["growth"] for p in per])
    return {
        "feedback": system.feedback,
        "paths": paths,
        "base_seed": base_seed,
        "per_path": per,
        "quantiles": {str(q): float(np.quantile(sup, q)) for q in (0.05, 0.25, 0.5, 0.75, 0.95)},
        "bounded_fraction": float(np.mean([p["bounded"] for p in per])),
        "min_growth": float(growth.min()),
        "blowups": int(sum(p["blowup_time"] is not None for p in per)),
    }


def audit_nonlinear_bounds(traj: Trajectory, system: ClosedLoopSystem, mu: float | None = None, stride: int = 1) -> dict:
    """Fitted constants (sup of LHS/RHS with C = 1) of the eight pointwise bounds on
    exp(-mu (t - s)) |A^i_k(s)| and lam_j^(1/4) exp(-mu (t - s)) |A^i_k(s)|.

    s and t = s + tau range over every ``stride``-th trajectory sample with
    0 < s < t <= T; i and j over all retained modes.  Keys (BOUND_KEYS) name
    the term (quad, cubic), the right-hand side form (l2: powers of |y|_2 and
    ||y||_(1/2); weighted: int y^2 phi_i^2) and the lam_j^(1/4) variants.

    The factor exp(-mu tau) appears on both sides of every bound, so the
    ratios do not depend on mu; it is kept in the report for reference.  Each
    log-ratio splits as L_i(s) + h_i(tau), which turns the sup over pairs into
    a running max over tau.
    """
    basis = system.basis
    mu = system.design.rho if mu is None and system.design is not None else mu
    t = traj.t[::stride]
    M = len(t)
    h = np.diff(t)
    if M < 3 or np.ptp(h) > 1e-9 * h[0]:
        raise ValueError("need at least 3 uniformly spaced samples")
    y = traj.y[::stride]
    G = traj.Gamma[::stride]
    nl = system.nonlinear
    v = y @ nl.phi.T
    a2, a3 = nl.fields(t[:, None])
    A2 = np.abs((G[:, None] * a2 * v**2) @ nl.wphi)            # (M, J)
    A3 = np.abs((G[:, None] ** 2 * a3 * v**3) @ nl.wphi)
    yphi = (v**2) @ (nl.w[:, None] * nl.phi**2)                # int y^2 phi_i^2
    with np.errstate(divide="ignore", invalid="ignore"):
        lA2, lA3, lyphi = np.log(A2), np.log(A3), np.log(yphi)
        ln2 = np.log(np.linalg.norm(y, axis=1))[:, None]
        lnh = np.log(fractional_norms(basis.lambdas, y, 0.5))[:, None]
        ls = np.log(t)[:, None]
        s_part = {
            "q_l2": lA2 - 2 * ln2 + 0.01 * ls,
            "q_w": lA2 - 0.5 * lyphi - ln2 + 0.01 * ls,
            "c_l2": lA3 - ln2 - 2 * lnh + 0.01 * ls,
            "c_w": lA3 - 0.5 * lyphi - 2 * lnh + 0.01 * ls,
        }

    lam = basis.lambdas
    li = lam[None, :]
    tau = (t[1:] - t[0])[:, None]
    lt = np.log(tau)
    pos = lam > 0
    lj = lam[pos]
    # max_j [log lam_j^(1/4) - lam_j tau / 4], shape (M-1, 1)
    jw = np.max(0.25 * np.log(lj)[None, :] - 0.25 * lj[None, :] * tau, axis=1, keepdims=True)

    tau_part = {
        "quad_l2": ("q_l2", -(0.74 + 0.25 * li) * tau + 0.99 * lt),
        "quad_weighted": ("q_w", -0.49 * tau + 0.49 * lt + 0 * li),
        "quad_l2_lam": ("q_l2", jw - (0.49 + 0.25 * li) * tau + 0.99 * lt),
        "quad_weighted_lam": ("q_w", jw - 0.24 * tau + 0.49 * lt + 0 * li),
        "cubic_l2": ("c_l2", -(7 / 12 - 0.01 + 0.25 * li) * tau + (10 / 12 - 0.01) * lt),
        "cubic_weighted": ("c_w", -(1 / 3 - 0.01) * tau + (1 / 3 - 0.01) * lt + 0 * li),
        "cubic_l2_lam": ("c_l2", jw - (5 / 12 - 0.01 + 0.25 * li) * tau + (11 / 12 - 0.01) * lt),
        "cubic_weighted_lam": ("c_w", jw - (1 / 6 - 0.01) * tau + (5 / 12 - 0.01) * lt + 0 * li),
    }
    out = {}
    for key, (which, htau) in tau_part.items():
        run = np.maximum.accumulate(htau, axis=0)               # sup over tau <= tau_k
        L = s_part[which][1 : M - 1]                            # s = t_1 .. t_{M-2}
        best = run[::-1][1:]                                    # for s = t_p, tau <= T - t_p
        with np.errstate(invalid="ignore"):
            total = L + best
        total = np.where(np.isnan(total), -np.inf, total)
        out[key] = float(np.exp(total.max()))
    out["mu"] = None if mu is None else float(mu)
    out["stride"] = int(stride)
    out["samples"] = int(M)
    return out
