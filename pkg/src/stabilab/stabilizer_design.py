"""Explicit finite-dimensional boundary feedback built from Neumann eigenfunctions.

Sign convention: the boundary condition is read with the inward normal, so
that Green's formula gives <-Lap y, phi_j> = lam_j y_j + <d_n y, phi_j>_0.
Under this convention the Neumann-map modes are

    <D_gamma g, phi_j> = -<g, phi_j>_0 / (gamma - mu_j)   (j <= N)
                         -<g, phi_j>_0 / (gamma + mu_j)   (j > N)

and every mode of the closed loop obeys dz_j/dt = -mu_j z_j - <u, phi_j>_0.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .spectral_basis import SpectralBasis

SINGULAR_GUARD = 1e-9
RANK_RTOL = 1e-10
MAX_COND = 1e12


class DesignRejected(ValueError):
    """The requested feedback cannot be constructed."""


class HypothesisError(ValueError):
    """A standing hypothesis of the construction fails."""


@dataclass(frozen=True)
class BoundaryField:
    values: np.ndarray
    weights: np.ndarray

    def inner(self, other) -> float:
        h = other.values if isinstance(other, BoundaryField) else np.asarray(other)
        return float(np.sum(self.weights * self.values * h))

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.weights * self.values**2)))


def select_unstable(basis: SpectralBasis, c: float, rho: float):
    """Return ``(N, mu)`` with mu_j = lam_j - c and N = #{mu_j <= rho}."""
    if rho <= 1.0:
        raise ValueError("rho must exceed 1")
    mu = basis.lambdas - c
    gap = np.min(np.abs(mu - rho))
    if gap < SINGULAR_GUARD:
        raise ValueError(f"rho={rho} coincides with an eigenvalue mu (distance {gap:.3g})")
    N = int(np.sum(mu <= rho))
    if N == 0:
        raise ValueError("no unstable modes: rho below every mu_j")
    if N >= basis.J:
        raise ValueError(f"all {basis.J} retained modes satisfy mu_j <= rho; increase J")
    return N, mu


def audit_decay_margin(alpha: float, rho: float, N: int, lambdas) -> dict:
    """The four margin inequalities tying alpha, rho and the unstable lambdas."""
    lam = np.asarray(lambdas, float)[:N]
    li = lam[:, None]
    lij = lam[:, None] + lam[None, :]
    lhs = {
        "cond1": -rho + 2 * alpha + 0.75 + 0.25 * li - 0.01,
        "cond2": -rho + 3 * alpha + 7.0 / 12.0 + 0.25 * li - 0.01,
        "cond3": -rho + 2 * alpha + 0.25 * lij + 0.5 - 0.01,
        "cond4": -rho + 3 * alpha + 5.0 / 12.0 + 0.25 * lij - 0.01,
    }
    per = {k: float(np.max(v)) for k, v in lhs.items()}
    worst = max(per.values())
    return {"ok": bool(worst <= 0.0), "worst_margin": worst, "per_condition": per}


def audit_simple_spectrum(mu, N: int, gap_tol: float = SINGULAR_GUARD) -> dict:
    """Simplicity of the first N eigenvalues mu_1 < ... < mu_N."""
    if gap_tol <= 0:
        raise ValueError("gap_tol must be positive")
    m = np.asarray(mu, float)[:N]
    if N <= 1:
        return {"ok": True, "min_gap": float("inf")}
    gaps = np.diff(m)
    min_gap = float(gaps.min())
    return {"ok": bool(min_gap > gap_tol), "min_gap": min_gap}


def boundary_gram(basis: SpectralBasis, n: int | None = None) -> np.ndarray:
    """<phi_i, phi_j>_0 on Gamma_1 for the first ``n`` modes."""
    tv = basis.trace_values if n is None else basis.trace_values[:, :n]
    return tv.T @ (basis.trace_weights[:, None] * tv)


def gram_matrix(basis: SpectralBasis, N: int):
    """Gram matrix of the first N traces; raises DesignRejected if rank < N."""
    B = boundary_gram(basis, N)
    sv = np.linalg.svd(B, compute_uv=False)
    rank = int(np.sum(sv > RANK_RTOL * sv.max())) if sv.max() > 0 else 0
    if rank < N:
        raise DesignRejected(
            f"boundary Gram matrix has rank {rank} < N={N}: traces on "
            f"{basis.domain.gamma1_edges} are linearly dependent"
        )
    return B, rank


@dataclass(frozen=True)
class StabilizerDesign:
    basis: SpectralBasis = field(repr=False)
    c: float
    rho: float
    alpha: float
    N: int
    mu: np.ndarray = field(repr=False)
    gammas: np.ndarray
    B: np.ndarray = field(repr=False)
    Lambdas: np.ndarray = field(repr=False)   # (N, N, N), Lambdas[k] diagonal
    Bk: np.ndarray = field(repr=False)        # (N, N, N)
    A: np.ndarray = field(repr=False)
    T: np.ndarray = field(repr=False)         # (N, N, n_trace): T[k, i] = phi_i / (gamma_k - mu_i)
    cond_sum: float
    gram_rank: int
    margin: dict = field(repr=False)
    spectrum: dict = field(repr=False)

    @property
    def J(self) -> int:
        return self.basis.J

    @property
    def inv_gaps(self) -> np.ndarray:
        """(N, N) array 1/(gamma_k - mu_i) indexed [k, i]."""
        return 1.0 / (self.gammas[:, None] - self.mu[None, : self.N])

    def reduced_matrix(self) -> np.ndarray:
        """System matrix of the first-N-mode ODE: -gamma_1 I + sum_{k>=2} (gamma_1 - gamma_k) B_k A."""
        g = self.gammas
        K = -g[0] * np.eye(self.N)
        for k in range(1, self.N):
            K += (g[0] - g[k]) * self.Bk[k] @ self.A
        return K

    def coupling(self) -> np.ndarray:
        """(J, N) matrix E with <u, phi_j>_0 = (E A Y_N)_j for the full feedback u."""
        Bfull = self.basis.trace_values.T @ (self.basis.trace_weights[:, None] * self.basis.trace_values[:, : self.N])
        return Bfull * self.inv_gaps.sum(axis=0)[None, :]

    def summary(self) -> dict:
        return {
            "c": self.c,
            "rho": self.rho,
            "alpha": self.alpha,
            "N": self.N,
            "J": self.J,
            "gammas": self.gammas.tolist(),
            "mu_unstable": self.mu[: self.N].tolist(),
            "mu_next": float(self.mu[self.N]),
            "cond_sum": self.cond_sum,
            "gram_rank": self.gram_rank,
            "B": self.B.tolist(),
            "A": self.A.tolist(),
            "decay_margin": self.margin,
            "simple_spectrum": self.spectrum,
        }


def assemble_design(
    basis: SpectralBasis,
    c: float,
    rho: float,
    alpha: float,
    gammas=None,
    require_margin: bool = False,
) -> StabilizerDesign:
    """Build B, Lambda_k, B_k, A = (sum B_k)^-1 and the trace tensor T.

    Simplicity of the first N eigenvalues and trace independence are required
    for the construction itself.  The decay-margin condition is audited and
    stored; it is only enforced when ``require_margin`` is set, since the
    linear feedback does not depend on it.
    """
    N, mu = select_unstable(basis, c, rho)
    spectrum = audit_simple_spectrum(mu, N)
    if not spectrum["ok"]:
        raise DesignRejected(f"first N={N} eigenvalues are not simple (min gap {spectrum['min_gap']:.3g})")
    margin = audit_decay_margin(alpha, rho, N, basis.lambdas)
    if require_margin and not margin["ok"]:
        raise HypothesisError(f"decay-margin condition fails: worst margin {margin['worst_margin']:.6g} > 0")
    if gammas is None:
        gammas = rho + np.arange(1, N + 1, dtype=float)
    gammas = np.asarray(gammas, float)
    if gammas.shape != (N,):
        raise ValueError(f"need {N} gammas, got {gammas.shape}")
    if gammas[0] <= rho or np.any(np.diff(gammas) <= 0):
        raise ValueError("gammas must be strictly increasing with gamma_1 > rho")
    gaps = gammas[:, None] - mu[None, :N]
    if np.min(np.abs(gaps)) < SINGULAR_GUARD:
        raise DesignRejected("some gamma_k coincides with an unstable mu_j")

    B, rank = gram_matrix(basis, N)
    Lambdas = np.stack([np.diag(1.0 / g) for g in gaps])
    Bk = np.stack([L @ B @ L for L in Lambdas])
    S = Bk.sum(axis=0)
    cond = float(np.linalg.cond(S))
    if not np.isfinite(cond) or cond > MAX_COND:
        raise DesignRejected(f"sum of B_k is numerically singular (cond {cond:.3g})")
    A = np.linalg.solve(S, np.eye(N))
    A = 0.5 * (A + A.T)
    T = (1.0 / gaps)[:, :, None] * basis.trace_values[:, :N].T[None, :, :]
    return StabilizerDesign(
        basis=basis, c=float(c), rho=float(rho), alpha=float(alpha), N=N, mu=mu,
        gammas=gammas, B=B, Lambdas=Lambdas, Bk=Bk, A=A, T=T, cond_sum=cond,
        gram_rank=rank, margin=margin, spectrum=spectrum,
    )


def feedback_u(design: StabilizerDesign, y):
    """Boundary feedbacks u_k and u = sum_k u_k on the Gamma_1 trace nodes.

    u_k(x) = < A Y_N, (phi_i(x) / (gamma_k - mu_i))_i >_N, Y_N the first N modes of y.
    """
    y = np.asarray(y, float)
    v = design.A @ y[: design.N]
    uk = np.einsum("kix,i->kx", design.T, v)
    w = design.basis.trace_weights
    return [BoundaryField(row, w) for row in uk], BoundaryField(uk.sum(axis=0), w)


def neumann_map_modes(basis: SpectralBasis, mu, N: int, g, gamma: float) -> np.ndarray:
    """Modes of the Neumann lifting D_gamma g for boundary data g on Gamma_1."""
    g = g.values if isinstance(g, BoundaryField) else np.asarray(g, float)
    mu = np.asarray(mu, float)
    denom = np.where(np.arange(basis.J) < N, gamma - mu, gamma + mu)
    if np.min(np.abs(denom)) < SINGULAR_GUARD:
        raise DesignRejected(f"Neumann map singular at gamma={gamma}")
    proj = basis.trace_values.T @ (basis.trace_weights * g)
    return -proj / denom


def neumann_modes(design: StabilizerDesign, g, gamma_index: int) -> np.ndarray:
    """Modes of D_{gamma_k} g for the k-th design gamma (0-based index)."""
    gamma = float(design.gammas[gamma_index])
    return neumann_map_modes(design.basis, design.mu, design.N, g, gamma)


def closed_loop_generator(design: StabilizerDesign) -> np.ndarray:
    """Full J x J mode-space generator assembled column by column from the feedback.

    Each column applies the realized boundary feedback to a unit mode vector
    and projects its Gamma_1 trace onto every eigenfunction.  It does not use
    the reduced-system formula and serves as an independent check of it.
    """
    J = design.J
    G = np.diag(-design.mu)
    for m in range(design.N):
        e = np.zeros(J)
        e[m] = 1.0
        _, u = feedback_u(design, e)
        G[:, m] -= design.basis.trace_values.T @ (u.weights * u.values)
    return G
