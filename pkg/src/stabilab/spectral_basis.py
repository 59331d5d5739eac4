"""Neumann-Laplace eigenbasis on a rectangle.

Eigenfunctions are products of cosines,

    phi_{k,l}(x, y) = n_k(Lx) n_l(Ly) cos(k pi x / Lx) cos(l pi y / Ly),

with n_0(L) = 1/sqrt(L) and n_k(L) = sqrt(2/L) for k >= 1, and eigenvalues
(k pi / Lx)^2 + (l pi / Ly)^2.  All integrals are computed with the tensor
trapezoid rule on a uniform closed grid, which is exact for the cosine
products that appear as long as the grid resolves twice the highest
wavenumber.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

EDGES = ("bottom", "top", "left", "right")
# adjacent edge pairs give rank-deficient trace Gram matrices (phi_00 - phi_10 - phi_01 + phi_11 vanishes there)
DEFAULT_GAMMA1 = ("bottom", "top", "left")

# primary sort key precision; eigenvalues closer than this are ties
_TIE_DECIMALS = 9
_MAX_LATTICE_POINTS = 4_000_000


class ResolutionError(ValueError):
    """Quadrature grid too coarse for the requested modes."""


@dataclass(frozen=True)
class RectDomain:
    """Rectangle [0, Lx] x [0, Ly] with the controlled boundary part."""

    Lx: float
    Ly: float
    grid_nx: int = 32
    grid_ny: int = 32
    gamma1_edges: tuple[str, ...] = DEFAULT_GAMMA1

    def __post_init__(self):
        if not (self.Lx > 0 and self.Ly > 0):
            raise ValueError("side lengths must be positive")
        if self.grid_nx < 4 or self.grid_ny < 4:
            raise ValueError("grid resolutions must be >= 4")
        edges = tuple(self.gamma1_edges)
        if not edges:
            raise ValueError("gamma1_edges must be nonempty")
        bad = set(edges) - set(EDGES)
        if bad:
            raise ValueError(f"unknown edges {sorted(bad)}")
        if len(set(edges)) != len(edges):
            raise ValueError("duplicate edges in gamma1_edges")
        object.__setattr__(self, "gamma1_edges", edges)

    @property
    def area(self) -> float:
        return self.Lx * self.Ly

    @classmethod
    def for_modes(cls, Lx, Ly, J, gamma1_edges=DEFAULT_GAMMA1, oversample=1):
        """Rectangle whose grid resolves the first ``J`` modes."""
        lam, kx, ky = lattice_eigenvalues(Lx, Ly, J)
        nx = oversample * (2 * int(kx.max()) + 2)
        ny = oversample * (2 * int(ky.max()) + 2)
        return cls(Lx, Ly, max(nx, 4), max(ny, 4), tuple(gamma1_edges))

    @classmethod
    def aspect_sqrt2(cls, J, Lx=math.pi, gamma1_edges=DEFAULT_GAMMA1, oversample=1):
        """Default domain Lx x Lx/sqrt(2); its low spectrum k^2 + 2 l^2 is simple below 9."""
        return cls.for_modes(Lx, Lx / math.sqrt(2.0), J, gamma1_edges, oversample)


@dataclass(frozen=True)
class EigenPair:
    kx: int
    ky: int
    lam: float
    norm_const: float


def _norm_1d(k, L):
    return 1.0 / math.sqrt(L) if k == 0 else math.sqrt(2.0 / L)


def trapezoid_weights(n: int, L: float) -> np.ndarray:
    h = L / (n - 1)
    w = np.full(n, h)
    w[0] = w[-1] = 0.5 * h
    return w


def lattice_eigenvalues(Lx, Ly, count):
    """First ``count`` Neumann eigenvalues (origin included) with wavenumbers.

    Ties (to ``_TIE_DECIMALS`` decimals) are ordered lexicographically in
    ``(kx, ky)``.
    """
    if count < 1:
        raise ValueError("count must be positive")
    ax, ay = (math.pi / Lx) ** 2, (math.pi / Ly) ** 2
    # every (k, l) with lam <= R lies in the window k <= sqrt(R/ax), l <= sqrt(R/ay)
    R = max(ax, ay) * 4.0
    while True:
        kmax = int(math.floor(math.sqrt(R / ax)))
        lmax = int(math.floor(math.sqrt(R / ay)))
        if (kmax + 1) * (lmax + 1) > _MAX_LATTICE_POINTS:
            raise ValueError(f"J={count} exceeds the enumerable lattice window")
        k, l = np.meshgrid(np.arange(kmax + 1), np.arange(lmax + 1), indexing="ij")
        k, l = k.ravel(), l.ravel()
        lam = ax * k**2 + ay * l**2
        inside = lam <= R
        if inside.sum() >= count:
            break
        R *= 2.0
    k, l, lam = k[inside], l[inside], lam[inside]
    order = np.lexsort((l, k, np.round(lam, _TIE_DECIMALS)))[:count]
    return lam[order], k[order], l[order]


def _cos_values(k, nodes, L):
    norms = np.array([_norm_1d(int(kk), L) for kk in k])
    return norms * np.cos(np.outer(nodes, k) * (math.pi / L))


def _edge_quadrature(domain: RectDomain, edges):
    """Nodes (x, y) and weights of the trapezoid rule on the listed edges."""
    xs, ys, ws = [], [], []
    x = np.linspace(0.0, domain.Lx, domain.grid_nx)
    y = np.linspace(0.0, domain.Ly, domain.grid_ny)
    wx = trapezoid_weights(domain.grid_nx, domain.Lx)
    wy = trapezoid_weights(domain.grid_ny, domain.Ly)
    for edge in edges:
        if edge == "bottom":
            xs.append(x); ys.append(np.zeros_like(x)); ws.append(wx)
        elif edge == "top":
            xs.append(x); ys.append(np.full_like(x, domain.Ly)); ws.append(wx)
        elif edge == "left":
            xs.append(np.zeros_like(y)); ys.append(y); ws.append(wy)
        else:
            xs.append(np.full_like(y, domain.Lx)); ys.append(y); ws.append(wy)
    return np.concatenate(xs), np.concatenate(ys), np.concatenate(ws)


@dataclass(frozen=True)
class SpectralBasis:
    domain: RectDomain
    pairs: tuple[EigenPair, ...]
    x: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)          # (nx, ny)
    grid_values: np.ndarray = field(repr=False)      # (nx*ny, J)
    trace_x: np.ndarray = field(repr=False)
    trace_y: np.ndarray = field(repr=False)
    trace_weights: np.ndarray = field(repr=False)
    trace_values: np.ndarray = field(repr=False)     # (n_boundary, J)

    @property
    def J(self) -> int:
        return len(self.pairs)

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([p.lam for p in self.pairs])

    @property
    def kx(self) -> np.ndarray:
        return np.array([p.kx for p in self.pairs])

    @property
    def ky(self) -> np.ndarray:
        return np.array([p.ky for p in self.pairs])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.domain.grid_nx, self.domain.grid_ny)

    def evaluate(self, x, y) -> np.ndarray:
        """phi_j at arbitrary points; returns (n_points, J)."""
        x = np.atleast_1d(np.asarray(x, float))
        y = np.atleast_1d(np.asarray(y, float))
        cx = _cos_values(self.kx, x, self.domain.Lx)
        cy = _cos_values(self.ky, y, self.domain.Ly)
        return cx * cy

    def boundary_quadrature(self, edges=EDGES):
        """(values (n, J), weights (n,)) for the trace on the given edges."""
        bx, by, bw = _edge_quadrature(self.domain, edges)
        return self.evaluate(bx, by), bw

    def boundary_inner(self, g, h) -> float:
        """<g, h>_0 on Gamma_1 for fields sampled at the trace nodes."""
        return float(np.sum(self.trace_weights * g * h))

    def padded_grid(self, factor: int = 2, extra: int = 0):
        """Finer grid for products: nodes, flat weights and phi values.

        ``factor`` multiplies the number of intervals; ``extra`` adds
        intervals to accommodate spatially varying coefficients.
        """
        nx = factor * (self.domain.grid_nx - 1) + extra + 1
        ny = factor * (self.domain.grid_ny - 1) + extra + 1
        x = np.linspace(0.0, self.domain.Lx, nx)
        y = np.linspace(0.0, self.domain.Ly, ny)
        w = np.outer(trapezoid_weights(nx, self.domain.Lx), trapezoid_weights(ny, self.domain.Ly))
        cx = _cos_values(self.kx, x, self.domain.Lx)
        cy = _cos_values(self.ky, y, self.domain.Ly)
        phi = np.einsum("aj,bj->abj", cx, cy).reshape(nx * ny, self.J)
        return x, y, w.ravel(), phi


def build_basis(domain: RectDomain, J: int) -> SpectralBasis:
    """First ``J`` Neumann eigenpairs of ``domain`` with grid and trace samples."""
    if J < 2:
        raise ValueError("J must be >= 2")
    lam, kx, ky = lattice_eigenvalues(domain.Lx, domain.Ly, J)
    if domain.grid_nx < 2 * kx.max() + 2 or domain.grid_ny < 2 * ky.max() + 2:
        raise ResolutionError(
            f"grid {domain.grid_nx}x{domain.grid_ny} does not resolve wavenumbers "
            f"({kx.max()}, {ky.max()}); need >= {2 * kx.max() + 2}x{2 * ky.max() + 2}"
        )
    pairs = tuple(
        EigenPair(int(a), int(b), float(c), _norm_1d(int(a), domain.Lx) * _norm_1d(int(b), domain.Ly))
        for a, b, c in zip(kx, ky, lam)
    )
    x = np.linspace(0.0, domain.Lx, domain.grid_nx)
    y = np.linspace(0.0, domain.Ly, domain.grid_ny)
    w = np.outer(trapezoid_weights(domain.grid_nx, domain.Lx), trapezoid_weights(domain.grid_ny, domain.Ly))
    cx = _cos_values(kx, x, domain.Lx)
    cy = _cos_values(ky, y, domain.Ly)
    grid = np.einsum("aj,bj->abj", cx, cy).reshape(-1, J)
    bx, by, bw = _edge_quadrature(domain, domain.gamma1_edges)
    trace = _cos_values(kx, bx, domain.Lx) * _cos_values(ky, by, domain.Ly)
    return SpectralBasis(domain, pairs, x, y, w, grid, bx, by, bw, trace)


def eval_field(basis: SpectralBasis, y) -> np.ndarray:
    """Synthesize sum_j y_j phi_j on the quadrature grid; returns (nx, ny)."""
    y = np.asarray(y, float)
    if y.shape != (basis.J,):
        raise ValueError(f"mode vector has length {y.shape}, expected ({basis.J},)")
    return (basis.grid_values @ y).reshape(basis.shape)


def project(basis: SpectralBasis, field) -> np.ndarray:
    """Quadrature modes <field, phi_j> of a grid field."""
    f = np.asarray(field, float).reshape(-1)
    return basis.grid_values.T @ (basis.weights.ravel() * f)


def gram_matrix_interior(basis: SpectralBasis) -> np.ndarray:
    w = basis.weights.ravel()
    return basis.grid_values.T @ (w[:, None] * basis.grid_values)


def l2_norm(y) -> float:
    return float(np.sqrt(np.sum(np.square(y))))


def fractional_norm(basis: SpectralBasis, y, s: float) -> float:
    """Spectral H^s norm (sum (1 + lambda_j)^s y_j^2)^(1/2)."""
    if not 0.0 < s <= 1.0:
        raise ValueError("s must lie in (0, 1]")
    y = np.asarray(y, float)
    if y.shape[-1] != basis.J:
        raise ValueError("mode vector length mismatch")
    return float(np.sqrt(np.sum((1.0 + basis.lambdas) ** s * y**2)))


def fractional_norms(lambdas, Y, s):
    """Row-wise spectral H^s norms of a (n, J) array of mode vectors."""
    return np.sqrt(np.sum((1.0 + lambdas) ** s * np.square(Y), axis=-1))


def _count_bound(Lx, Ly, x):
    """Upper bound on #{(k, l) >= 0 : lam_{k,l} <= x}, origin included."""
    X = math.sqrt(x) * Lx / math.pi
    Y = math.sqrt(x) * Ly / math.pi
    return math.pi * X * Y / 4.0 + X + Y + 1.0


def audit_series(domain: RectDomain, exponent: float, J_max: int, tol: float = 0.05) -> dict:
    """Partial sum of lambda^-exponent over nonzero eigenvalues plus a rigorous tail bound.

    The tail uses Stieltjes integration against the lattice counting function
    N(x) <= (pi/4) X Y + X + Y + 1 (X = sqrt(x) Lx/pi, Y = sqrt(x) Ly/pi):

        sum_{lam > L} lam^-s <= -N(L) L^-s + s int_L^inf N+(x) x^(-s-1) dx,

    finite iff s > 1.
    """
    if exponent <= 0:
        raise ValueError("exponent must be positive")
    if J_max < 100:
        raise ValueError("J_max must be >= 100")
    s = float(exponent)
    lam, _, _ = lattice_eigenvalues(domain.Lx, domain.Ly, J_max + 1)
    nonzero = lam[1:]
    partial = float(np.sum(nonzero ** -s))
    cap = float(nonzero[-1])
    key = np.round(cap, _TIE_DECIMALS)
    # eigenvalues tied with cap that fell outside the first J_max
    all_lam, _, _ = lattice_eigenvalues(domain.Lx, domain.Ly, J_max + 1 + 64)
    n_le = int(np.sum(np.round(all_lam, _TIE_DECIMALS) <= key))
    while n_le == len(all_lam):
        all_lam, _, _ = lattice_eigenvalues(domain.Lx, domain.Ly, 2 * len(all_lam))
        n_le = int(np.sum(np.round(all_lam, _TIE_DECIMALS) <= key))
    leftover_ties = n_le - (J_max + 1)
    if s <= 1.0:
        tail = math.inf
    else:
        a = math.pi * domain.Lx * domain.Ly / (4.0 * math.pi**2)
        b = (domain.Lx + domain.Ly) / math.pi
        integral = (
            s * a * cap ** (1.0 - s) / (s - 1.0)
            + s * b * cap ** (0.5 - s) / (s - 0.5)
            + cap ** (-s)
        )
        tail = leftover_ties * cap ** (-s) + integral - n_le * cap ** (-s)
        tail = max(tail, 0.0)
    converged = math.isfinite(tail) and tail < tol * partial
    return {
        "exponent": s,
        "J_max": int(J_max),
        "lambda_cap": cap,
        "partial_sum": partial,
        "tail_bound": tail,
        "total_bound": partial + tail,
        "converged": bool(converged),
    }


def _heat_tail_sup(basis: SpectralBasis, t_values, M=None) -> float:
    M = basis.J // 2 if M is None else M
    lam = basis.lambdas[M - 1:]
    phi2 = basis.grid_values[:, M - 1:] ** 2
    best = 0.0
    for t in t_values:
        s = phi2 @ np.exp(-lam * t)
        best = max(best, float(t * s.max()))
    return best


def _eigen_fits(basis: SpectralBasis, t_values):
    lam = basis.lambdas[1:]
    sup = np.abs(basis.grid_values[:, 1:]).max(axis=0)
    c_inf = float(np.max(sup / lam**0.25))
    vals, w = basis.boundary_quadrature(EDGES)
    tr = np.sqrt(w @ vals[:, 1:] ** 2)
    c_tr = float(np.max(tr / lam ** (1.0 / 6.0)))
    return c_inf, c_tr, _heat_tail_sup(basis, t_values)


def audit_eigen_bounds(basis: SpectralBasis, stability_tol: float = 0.10, n_times: int = 400) -> dict:
    """Fit the constants in |phi_j|_inf <= C lam^1/4, |phi_j|_L2(bdry) <= C lam^1/6 and
    sup_t t * sum_{j >= J/2} exp(-lam_j t) phi_j^2 <= C, then redo with 2J modes."""
    if basis.J < 20:
        raise ValueError("J must be >= 20")
    t_values = np.logspace(-3, 1, n_times)
    fits = _eigen_fits(basis, t_values)
    d = basis.domain
    fine_domain = RectDomain.for_modes(d.Lx, d.Ly, 2 * basis.J, d.gamma1_edges)
    fine = build_basis(fine_domain, 2 * basis.J)
    fits2 = _eigen_fits(fine, t_values)
    changes = [abs(b - a) / a for a, b in zip(fits, fits2)]
    ok = all(math.isfinite(v) for v in fits + fits2) and max(changes) < stability_tol
    return {
        "J": basis.J,
        "C_infty_fit": fits[0],
        "C_trace_fit": fits[1],
        "C_heatkernel_fit": fits[2],
        "C_infty_fit_2J": fits2[0],
        "C_trace_fit_2J": fits2[1],
        "C_heatkernel_fit_2J": fits2[2],
        "relative_changes": changes,
        "ok": bool(ok),
    }
