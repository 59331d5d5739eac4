"""Scalar Wiener paths, the exponential rescaling factor and the coefficient envelopes."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

RNG_ALGORITHM = "numpy.Philox4x64-10 keyed by SeedSequence([seed, stream])"


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator for ``(seed, stream)``; streams index MC paths."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


def child_seed(base_seed: int, path_index: int) -> int:
    """Seed of Monte Carlo path ``path_index``: first word of SeedSequence([base, index])."""
    return int(np.random.SeedSequence([int(base_seed), int(path_index)]).generate_state(1, np.uint32)[0])


@dataclass(frozen=True)
class NoisePath:
    theta: float
    t: np.ndarray = field(repr=False)
    W: np.ndarray = field(repr=False)
    seed: int = 0

    @property
    def log_gamma(self) -> np.ndarray:
        return self.theta * self.W - 0.5 * self.theta**2 * self.t

    @property
    def Gamma(self) -> np.ndarray:
        return np.exp(self.log_gamma)

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    def gamma_at(self, t):
        """Gamma at arbitrary time(s); W between samples is the Brownian-bridge mean."""
        if np.ndim(t) == 0:
            Wt = float(np.interp(t, self.t, self.W))
            return math.exp(self.theta * Wt - 0.5 * self.theta**2 * t)
        t = np.asarray(t, float)
        return np.exp(self.theta * np.interp(t, self.t, self.W) - 0.5 * self.theta**2 * t)


def _time_grid(dt, T):
    n = int(round(T / dt))
    if abs(n * dt - T) > 1e-9 * max(T, 1.0):
        raise ValueError(f"T={T} is not a multiple of dt={dt}")
    return np.arange(n + 1) * dt


def sample_path(seed: int, theta: float, dt: float, T: float, stream: int = 0) -> NoisePath:
    """Brownian path on [0, T] with independent N(0, dt) increments."""
    if dt <= 0 or T < dt:
        raise ValueError("need dt > 0 and T >= dt")
    if theta < 0:
        raise ValueError("theta must be nonnegative")
    t = _time_grid(dt, T)
    inc = make_rng(seed, stream).standard_normal(len(t) - 1) * math.sqrt(dt)
    W = np.concatenate([[0.0], np.cumsum(inc)])
    return NoisePath(float(theta), t, W, int(seed))


def refine_path(path: NoisePath, seed: int | None = None) -> NoisePath:
    """Halve the step by Brownian-bridge sampling of the midpoints; coarse samples are kept."""
    seed = path.seed if seed is None else seed
    dt = np.diff(path.t)
    z = make_rng(seed, len(path.t)).standard_normal(len(dt))
    mid = 0.5 * (path.W[:-1] + path.W[1:]) + np.sqrt(dt / 4.0) * z
    W = np.empty(2 * len(path.W) - 1)
    W[0::2] = path.W
    W[1::2] = mid
    t = np.empty_like(W)
    t[0::2] = path.t
    t[1::2] = 0.5 * (path.t[:-1] + path.t[1:])
    return NoisePath(path.theta, t, W, path.seed)


@dataclass(frozen=True)
class CoeffTerm:
    """amplitude * t**exponent * profile(x); profile is 1 or a cosine product."""

    amplitude: float
    exponent: float = 0.0
    wavenumbers: tuple[int, int] | None = None

    def __post_init__(self):
        if self.exponent < 0:
            raise ValueError("exponents must be nonnegative")


@dataclass(frozen=True)
class Coefficient:
    """a(t, x) = constant * profile0(x) + sum_k terms_k."""

    constant: float = 0.0
    constant_wavenumbers: tuple[int, int] | None = None
    terms: tuple[CoeffTerm, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(sorted(self.terms, key=lambda s: s.exponent)))

    @property
    def exponents(self) -> list[float]:
        return [s.exponent for s in self.terms]

    @property
    def is_zero(self) -> bool:
        return self.constant == 0.0 and all(s.amplitude == 0.0 for s in self.terms)

    @property
    def max_wavenumbers(self) -> tuple[int, int]:
        wn = [self.constant_wavenumbers] + [s.wavenumbers for s in self.terms]
        wn = [w for w in wn if w is not None]
        if not wn:
            return (0, 0)
        return (max(w[0] for w in wn), max(w[1] for w in wn))


@dataclass(frozen=True)
class CoeffSpec:
    a2: Coefficient = Coefficient()
    a3: Coefficient = Coefficient(constant=-1.0)
    C_a: float = 1.0

    def __post_init__(self):
        if self.C_a <= 0:
            raise ValueError("C_a must be positive")

    @property
    def m_S(self) -> float:
        tops = [c.exponents[-1] for c in (self.a2, self.a3) if c.exponents]
        return max(tops) if tops else 0.0

    def envelope(self, which: int, t: float) -> float:
        c = self.a2 if which == 2 else self.a3
        return self.C_a * (sum(t**m for m in c.exponents) + 1.0)


def _profile(wavenumbers, X, Y, Lx, Ly):
    if wavenumbers is None:
        return 1.0
    k, l = wavenumbers
    return np.cos(k * math.pi * X / Lx) * np.cos(l * math.pi * Y / Ly)


def coefficient_field(coef: Coefficient, t, X, Y, Lx, Ly):
    out = coef.constant * _profile(coef.constant_wavenumbers, X, Y, Lx, Ly) + np.zeros_like(X)
    for s in coef.terms:
        out = out + s.amplitude * t**s.exponent * _profile(s.wavenumbers, X, Y, Lx, Ly)
    return out


class EnvelopeViolation(RuntimeError):
    pass


def eval_coeffs(coeff: CoeffSpec, t: float, X, Y, Lx: float, Ly: float, check: bool = True):
    """a2(t, .) and a3(t, .) sampled at points (X, Y); checks the growth envelope."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    X = np.asarray(X, float)
    Y = np.asarray(Y, float)
    a2 = coefficient_field(coeff.a2, t, X, Y, Lx, Ly)
    a3 = coefficient_field(coeff.a3, t, X, Y, Lx, Ly)
    if check:
        for i, a in ((2, a2), (3, a3)):
            sup = float(np.max(np.abs(a))) if a.size else 0.0
            if sup > coeff.envelope(i, t) * (1 + 1e-12):
                raise EnvelopeViolation(f"sup|a{i}(t={t})| = {sup} exceeds C_a envelope {coeff.envelope(i, t)}")
    return a2, a3


def audit_noise_condition(theta: float, coeff: CoeffSpec) -> dict:
    """theta1 = theta^2/2 - m_S - 1/100 must be positive."""
    theta1 = 0.5 * theta**2 - coeff.m_S - 0.01
    return {"theta": float(theta), "m_S": coeff.m_S, "theta1": theta1, "ok": bool(theta1 > 0)}


def _sup_coeff(coef: Coefficient, t):
    # triangle-inequality bound (each cosine profile has sup 1); exact for constant profiles
    c = abs(coef.constant) + sum(abs(s.amplitude) * t**s.exponent for s in coef.terms)
    if coef.constant_wavenumbers is None and all(s.wavenumbers is None for s in coef.terms):
        c = abs(coef.constant + sum(s.amplitude * t**s.exponent for s in coef.terms))
    return c


def audit_rescaled_decay(path: NoisePath, coeff: CoeffSpec, X=None, Y=None, Lx=None, Ly=None) -> dict:
    """sup over sample times t > 0 of t^(1/100) Gamma(t) sup_x |a_i(t, x)|, i = 2, 3.

    With grid points given, sup_x is taken on the grid; otherwise the
    profiles' analytic sup is used.
    """
    t = path.t[1:]
    G = path.Gamma[1:]
    out = {}
    for i, coef in ((2, coeff.a2), (3, coeff.a3)):
        if X is not None:
            sup = np.array([np.max(np.abs(coefficient_field(coef, tt, X, Y, Lx, Ly))) for tt in t])
        else:
            sup = np.array([_sup_coeff(coef, tt) for tt in t])
        ratio = t**0.01 * G * sup
        k = int(np.argmax(ratio))
        out[f"sup_ratio_i{i}"] = float(ratio[k])
        out[f"argmax_t_i{i}"] = float(t[k])
    out["T"] = float(path.t[-1])
    out["dt"] = path.dt
    return out
