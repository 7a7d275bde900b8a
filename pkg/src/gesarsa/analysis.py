"""Analytic side of Gradient Expected Sarsa(lambda).

Key matrices ``A, b, M`` of the expected update, MSPBE in both its quadratic
and projected-Bellman forms, TD fixed points, the spectral stability test of
the off-line update, the constant step sizes of the linear-rate result, and
the Lyapunov weighting used to study the stochastic iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mdp import (
    FeatureMap,
    FiniteMdp,
    Policy,
    coverage_check,
    state_action_transition,
    stationary_distribution,
)

COND_LIMIT = 1e12


class SolvabilityError(np.linalg.LinAlgError):
    """A linear system the analysis depends on is singular or too ill-conditioned."""


class RankError(SolvabilityError):
    """M = Phi^T Xi Phi is singular: the features do not have full column rank."""


class HurwitzError(ValueError):
    pass


@dataclass(frozen=True)
class KeyMatrices:
    A: np.ndarray
    b: np.ndarray
    M: np.ndarray
    lam: float
    gamma: float
    provenance: str = "analytic"
    n_samples: int = 0

    def __post_init__(self):
        if self.provenance not in ("analytic", "monte-carlo"):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        tol = 1e-12 if self.provenance == "analytic" else 1e-3
        scale = max(1.0, float(np.max(np.abs(self.M)))) if self.M.size else 1.0
        if np.max(np.abs(self.M - self.M.T), initial=0.0) > tol * scale:
            raise ValueError(f"M is not symmetric within {tol:g}")

    @property
    def p(self) -> int:
        return self.A.shape[0]

    def scaled(self, c: float) -> "KeyMatrices":
        return KeyMatrices(c * self.A, c * self.b, c * self.M, self.lam, self.gamma, self.provenance)


@dataclass(frozen=True)
class StabilityReport:
    eigenvalues: np.ndarray
    stable: bool
    max_real_part: float
    safe_step_size: float | None
    spectral_radius: float | None = None


@dataclass(frozen=True)
class RateConstants:
    nu: float
    alpha_star: float
    beta_star: float
    contraction: float
    kappa_M: float
    kappa_A: float
    sigma_max_A: float
    sigma_min_A: float
    lambda_max_M: float
    lambda_min_M: float


@dataclass(frozen=True)
class LyapunovSystem:
    H: np.ndarray
    L: np.ndarray
    Q1: np.ndarray
    Q2: np.ndarray
    Q: np.ndarray
    weight_theta: float
    weight_rho: float
    residual_1: float
    residual_2: float


@dataclass(frozen=True)
class FixedPointRow:
    theta: np.ndarray | None
    matrix: np.ndarray
    b: np.ndarray
    solvable: bool
    residual: float | None
    condition: float


def _inv_resolvent(P: np.ndarray, gamma: float, lam: float) -> np.ndarray:
    n = P.shape[0]
    R = np.eye(n) - gamma * lam * P
    if np.linalg.cond(R) > COND_LIMIT:
        raise SolvabilityError("I - gamma*lambda*P is singular")
    return np.linalg.inv(R)


def key_matrices(
    mdp: FiniteMdp,
    pi: Policy,
    mu: Policy,
    features: FeatureMap,
    lam: float,
    xi: np.ndarray | None = None,
) -> KeyMatrices:
    """A = Phi^T Xi (I - g l P)^-1 (g P - I) Phi, b = Phi^T Xi (I - g l P)^-1 R, M = Phi^T Xi Phi.

    ``P`` is the pair-level chain under the target policy and ``Xi`` the
    behaviour-policy stationary distribution.  ``xi`` overrides the weighting
    (handy to reproduce hand calculations that use an unnormalised Xi).
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if not coverage_check(pi, mu):
        raise ValueError("target policy is not covered by the behaviour policy")
    if features.pairs != mdp.pairs:
        raise ValueError("feature rows are not in the MDP's pair order")
    if xi is None:
        xi = stationary_distribution(mdp, mu).xi
    xi = np.asarray(xi, dtype=float)
    gamma = mdp.gamma
    P = state_action_transition(mdp, pi)
    Phi = features.matrix
    W = Phi.T * xi  # Phi^T Xi
    K = W @ _inv_resolvent(P, gamma, lam)
    A = K @ (gamma * P - np.eye(P.shape[0])) @ Phi
    b = K @ mdp.reward_vector()
    M = W @ Phi
    M = 0.5 * (M + M.T)
    return KeyMatrices(A, b, M, lam, gamma)


def _solve_checked(mat: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
    cond = np.linalg.cond(mat)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SolvabilityError(f"{what} is singular (condition number {cond:.3e})")
    return np.linalg.solve(mat, rhs)


def mspbe(km: KeyMatrices, theta, pinv: bool = False) -> float:
    """0.5 * (A theta + b)^T M^-1 (A theta + b).

    With ``pinv=True`` a rank-deficient M is allowed and its Moore-Penrose
    inverse is used; A theta + b always lies in the range of M, so this is
    still the projected Bellman error.
    """
    theta = np.asarray(theta, dtype=float)
    r = km.A @ theta + km.b
    if pinv:
        w = np.linalg.pinv(km.M, rcond=1e-10, hermitian=True) @ r
    else:
        try:
            w = _solve_checked(km.M, r, "M")
        except SolvabilityError as err:
            raise RankError(
                f"{err}; MSPBE needs features with full column rank (pass pinv=True to project instead)"
            ) from None
    return max(0.0, 0.5 * float(r @ w))


def mspbe_batch(km: KeyMatrices, thetas: np.ndarray, pinv: bool = False, Minv=None) -> np.ndarray:
    """MSPBE of every row of ``thetas``; ``Minv`` reuses a precomputed (pseudo-)inverse of M."""
    R = thetas @ km.A.T + km.b
    if Minv is None and pinv:
        Minv = np.linalg.pinv(km.M, rcond=1e-10, hermitian=True)
    elif Minv is None:
        if np.linalg.cond(km.M) > COND_LIMIT:
            raise RankError("M is singular; MSPBE needs features with full column rank")
        Minv = np.linalg.inv(km.M)
    return np.maximum(0.0, 0.5 * np.einsum("...i,ij,...j->...", R, Minv, R))


def lambda_bellman(mdp: FiniteMdp, pi: Policy, lam: float, q: np.ndarray) -> np.ndarray:
    """q + (I - lambda gamma P)^-1 (R + gamma P q - q)."""
    P = state_action_transition(mdp, pi)
    gamma = mdp.gamma
    residual = mdp.reward_vector() + gamma * P @ q - q
    return q + np.linalg.solve(np.eye(P.shape[0]) - lam * gamma * P, residual)


def projected_bellman_mspbe(
    mdp: FiniteMdp, pi: Policy, mu: Policy, features: FeatureMap, lam: float, theta, xi=None
) -> float:
    """0.5 * || Phi theta - Pi B_lambda(Phi theta) ||_Xi^2 with the projection built explicitly."""
    if xi is None:
        xi = stationary_distribution(mdp, mu).xi
    Phi = features.matrix
    Xi = np.diag(xi)
    proj = Phi @ np.linalg.pinv(Phi.T @ Xi @ Phi) @ Phi.T @ Xi
    q = Phi @ np.asarray(theta, dtype=float)
    diff = q - proj @ lambda_bellman(mdp, pi, lam, q)
    return 0.5 * float(diff @ Xi @ diff)


def td_fixed_point(km: KeyMatrices, allow_singular: bool = False) -> np.ndarray:
    """Solve A theta* = -b.

    A singular A raises :class:`SolvabilityError` unless ``allow_singular``;
    then the minimum-norm least-squares solution is returned, provided the
    system is consistent.
    """
    try:
        theta = _solve_checked(km.A, -km.b, "A")
    except SolvabilityError:
        if not allow_singular:
            raise
        theta, *_ = np.linalg.lstsq(km.A, -km.b, rcond=None)
        res = np.max(np.abs(km.A @ theta + km.b), initial=0.0)
        if res > 1e-10 * max(1.0, np.max(np.abs(km.b), initial=0.0)):
            raise SolvabilityError(f"A theta = -b has no solution (residual {res:.3e})") from None
    return theta


def spectral_radius(mat: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(mat))))


def stability_check(km: KeyMatrices | np.ndarray) -> StabilityReport:
    """Spectral test for the expected off-line update theta <- theta + alpha (A theta + b).

    Stable iff every eigenvalue of A has a negative real part.  In that case a
    step size with spectral radius of I + alpha A below one is returned: the
    largest admissible value is min(-2 Re(l) / |l|^2); half of it is the
    candidate, and it is halved further until the radius check passes.
    """
    A = km.A if isinstance(km, KeyMatrices) else np.asarray(km, dtype=float)
    try:
        eig = np.linalg.eigvals(A)
    except np.linalg.LinAlgError as err:
        raise np.linalg.LinAlgError(f"eigenvalue solver failed on A =\n{A}") from err
    max_re = float(np.max(eig.real))
    if max_re >= 0.0:
        return StabilityReport(eig, False, max_re, None)
    alpha = 0.5 * float(np.min(-2.0 * eig.real / np.abs(eig) ** 2))
    I = np.eye(A.shape[0])
    radius = spectral_radius(I + alpha * A)
    for _ in range(200):
        if radius < 1.0:
            break
        alpha *= 0.5
        radius = spectral_radius(I + alpha * A)
    else:
        raise np.linalg.LinAlgError("could not certify a safe step size")
    return StabilityReport(eig, True, max_re, alpha, radius)


def rate_constants(km: KeyMatrices) -> RateConstants:
    """Constant step sizes and contraction factor for the expected saddle-point iteration.

    For the non-symmetric A, singular values stand in for eigenvalue
    magnitudes; M is symmetric positive definite so both coincide there.
    """
    sA = np.linalg.svd(km.A, compute_uv=False)
    eM = np.linalg.eigvalsh(km.M)
    if sA[-1] <= 0 or sA[0] / sA[-1] > COND_LIMIT:
        raise SolvabilityError("A is singular; rate constants undefined")
    if eM[0] <= 0 or eM[-1] / eM[0] > COND_LIMIT:
        raise RankError("M is singular; rate constants undefined")
    smax_A, smin_A = float(sA[0]), float(sA[-1])
    lmax_M, lmin_M = float(eM[-1]), float(eM[0])
    kA = smax_A / smin_A
    kM = lmax_M / lmin_M
    nu = 2.0 * kA**2 * kM * smax_A / lmin_M
    alpha = lmin_M / ((lmax_M + lmin_M) * (smax_A**2 / lmin_M + nu * smax_A))
    beta = 2.0 / (lmax_M + lmin_M)
    contraction = 1.0 - 1.0 / (12.0 * kM**3 * kA**4)
    return RateConstants(nu, alpha, beta, contraction, kM, kA, smax_A, smin_A, lmax_M, lmin_M)


def solve_lyapunov(X: np.ndarray, Y: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Solve X Q + Q Y = C by Kronecker vectorisation (small p only)."""
    n = X.shape[0]
    I = np.eye(n)
    # column-major vec: vec(XQ + QY) = (I kron X + Y^T kron I) vec(Q)
    K = np.kron(I, X) + np.kron(Y.T, I)
    vec = _solve_checked(K, C.reshape(-1, order="F"), "Lyapunov operator")
    return vec.reshape(n, n, order="F")


def lyapunov_system(km: KeyMatrices) -> LyapunovSystem:
    """Q1, Q2 from  -H^T Q1 - Q1 H = I  and  M^T Q2 + Q2 M = I, with H = -A^T M^-1 A.

    Both need H Hurwitz and M positive stable; Q is the normalised
    block-diagonal weighting of (Q1, Q2) used for L(z) = z^T Q z.
    """
    Minv = np.linalg.inv(km.M)
    A, M = km.A, km.M
    H = -A.T @ Minv @ A
    L = 2.0 * A
    if np.max(np.linalg.eigvals(H).real) >= 0 or np.min(np.linalg.eigvals(M).real) <= 0:
        raise HurwitzError("Lyapunov equations need H = -A^T M^-1 A Hurwitz and M positive stable")
    p = km.p
    I = np.eye(p)
    Q1 = solve_lyapunov(-H.T, -H, I)
    Q2 = solve_lyapunov(M.T, M, I)
    Q1 = 0.5 * (Q1 + Q1.T)
    Q2 = 0.5 * (Q2 + Q2.T)
    r1 = float(np.max(np.abs(-H.T @ Q1 - Q1 @ H - I)))
    r2 = float(np.max(np.abs(M.T @ Q2 + Q2 @ M - I)))
    w1 = float(np.linalg.norm(Q1 @ A.T, 2))
    w2 = float(np.linalg.norm(Q2 @ Minv @ A @ L, 2))
    Q = np.zeros((2 * p, 2 * p))
    Q[:p, :p] = w1 * Q1
    Q[p:, p:] = w2 * Q2
    Q /= w1 + w2
    return LyapunovSystem(H, L, Q1, Q2, Q, w1, w2, r1, r2)


def lyapunov_state(km: KeyMatrices, theta, omega, theta_star, omega_star) -> np.ndarray:
    """z = (theta - theta*, varrho - varrho*), varrho = omega - M^-1 A theta."""
    theta, omega = np.asarray(theta, float), np.asarray(omega, float)
    theta_star, omega_star = np.asarray(theta_star, float), np.asarray(omega_star, float)
    shapes = {theta.shape[-1], omega.shape[-1], theta_star.shape[-1], omega_star.shape[-1], km.p}
    if len(shapes) != 1:
        raise ValueError("dimension mismatch between parameters and key matrices")
    G = np.linalg.solve(km.M, km.A)  # M^-1 A
    rho = omega - theta @ G.T
    rho_star = omega_star - G @ theta_star
    return np.concatenate([theta - theta_star, rho - rho_star], axis=-1)


def lyapunov_value(sys: LyapunovSystem, km: KeyMatrices, theta, omega, theta_star, omega_star) -> float:
    z = lyapunov_state(km, theta, omega, theta_star, omega_star)
    if sys.Q.shape[0] != z.shape[-1]:
        raise ValueError("Lyapunov system does not match the parameter dimension")
    return max(0.0, float(z @ sys.Q @ z))


def fixed_point_table(
    mdp: FiniteMdp, pi: Policy, mu: Policy, features: FeatureMap, lam: float, xi=None
) -> dict[str, FixedPointRow]:
    """TD fixed points of the expected-TD algorithms whose key matrix is known in closed form.

    GES(lambda) discounts the trace with the target chain; GTB(lambda) with the
    behaviour chain.  A singular row is flagged, not raised.
    """
    if not coverage_check(pi, mu):
        raise ValueError("target policy is not covered by the behaviour policy")
    if xi is None:
        xi = stationary_distribution(mdp, mu).xi
    gamma = mdp.gamma
    P_pi = state_action_transition(mdp, pi)
    P_mu = state_action_transition(mdp, mu)
    Phi = features.matrix
    W = Phi.T * xi
    I = np.eye(P_pi.shape[0])
    rows = {}
    for name, P_trace in (("GES", P_pi), ("GTB", P_mu)):
        K = W @ _inv_resolvent(P_trace, gamma, lam)
        mat = K @ (gamma * P_pi - I) @ Phi
        b = K @ mdp.reward_vector()
        cond = float(np.linalg.cond(mat))
        if np.isfinite(cond) and cond <= COND_LIMIT:
            theta = np.linalg.solve(mat, -b)
            res = float(np.max(np.abs(mat @ theta + b), initial=0.0))
            rows[name] = FixedPointRow(theta, mat, b, True, res, cond)
        else:
            rows[name] = FixedPointRow(None, mat, b, False, None, cond)
    return rows


def saddle_objective(km: KeyMatrices, theta, omega) -> float:
    """Psi(theta, omega) = (A theta + b)^T omega - 0.5 omega^T M omega."""
    theta, omega = np.asarray(theta, float), np.asarray(omega, float)
    return float((km.A @ theta + km.b) @ omega - 0.5 * omega @ km.M @ omega)


def dual_maximiser(km: KeyMatrices, theta) -> np.ndarray:
    """argmax_omega Psi(theta, omega) = M^-1 (A theta + b)."""
    return np.linalg.solve(km.M, km.A @ np.asarray(theta, float) + km.b)


@dataclass(frozen=True)
class BoundednessConstants:
    """Norm bounds on the stochastic estimators, from declared feature/reward/ratio bounds.

    Quantities that depend on the unknown mixing behaviour of the chain
    (``tau``) or on an unspecified matrix lemma (``kappa_2``) are ``None``.
    """

    C_M: float
    C_Minv: float
    C_e: float
    C_b: float
    C_A: float
    C_1: float
    C_2: float
    zeta: float
    c_b_tilde: float
    kappa_1: float | None = None
    kappa_2: float | None = None
    tau: float | None = None
    notes: dict = field(default_factory=dict)


def boundedness_constants(
    km: KeyMatrices,
    phi_max: float,
    reward_max: float,
    rho_max: float,
    beta_over_alpha: float,
    lyap: LyapunovSystem | None = None,
) -> BoundednessConstants:
    gamma, lam, p = km.gamma, km.lam, km.p
    decay = gamma * lam * rho_max
    if decay >= 1.0:
        raise ValueError(
            f"trace bound needs gamma*lambda*rho_max < 1 (got {decay:.4f}); traces are unbounded"
        )
    C_M = p * np.sqrt(p) * phi_max**2
    C_Minv = float(np.linalg.norm(np.linalg.inv(km.M), 2))
    C_e = phi_max / (1.0 - decay)
    C_b = reward_max * C_e
    C_A = (gamma + 1.0) * C_e * phi_max
    C_1 = 2 * C_A**2 * C_Minv + C_A + C_A**3 * C_Minv**2
    C_2 = C_A + C_M * C_Minv * C_A + C_M
    zeta = C_1 + beta_over_alpha * C_2
    kappa_1 = None
    if lyap is not None:
        kappa_1 = lyap.weight_theta / (lyap.weight_theta + lyap.weight_rho)
    return BoundednessConstants(
        C_M, C_Minv, C_e, C_b, C_A, C_1, C_2, zeta, C_b / C_2, kappa_1, None, None,
        notes={
            "tau": "mixing-time offset; not computable from the chain bounds alone",
            "kappa_2": "depends on an unstated eigenvalue lemma constant",
        },
    )
