"""Iterative learners: stochastic GES(lambda), its expected counterparts, schedules and diagnostics.

The stochastic update is written once, in :func:`ges_update`, and broadcasts
over leading batch axes of ``theta``/``omega``/``alpha``/``beta``.  Because
the behaviour trajectory does not depend on the parameters, a whole grid of
step sizes can be driven by the same transition stream; the eligibility
trace is shared by all of them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, NamedTuple

import numpy as np

from .analysis import (
    KeyMatrices,
    LyapunovSystem,
    RateConstants,
    dual_maximiser,
    lyapunov_state,
    mspbe_batch,
    saddle_objective,
)

DIVERGENCE_LIMIT = 1e12


class Transition(NamedTuple):
    """One behaviour step.  ``expected_phi_next`` is zero at terminal transitions.

    The next action is not stored: the expected TD error marginalises it.
    ``episode_end`` marks a truncation boundary: bootstrapping still happens,
    but the trace is cleared afterwards.
    """

    s: object
    a: int
    r: float
    s_next: object
    rho: float
    phi: np.ndarray
    expected_phi_next: np.ndarray
    terminal: bool = False
    episode_end: bool = False


@dataclass
class LearnerState:
    theta: np.ndarray
    omega: np.ndarray
    trace: np.ndarray
    t: int = 0
    diverged: bool = False
    diverged_at: int | None = None

    @classmethod
    def zeros(cls, p: int, batch: tuple = ()) -> "LearnerState":
        return cls(np.zeros(batch + (p,)), np.zeros(batch + (p,)), np.zeros(p))

    @property
    def p(self) -> int:
        return self.theta.shape[-1]


def ges_update(theta, omega, trace, phi, phi_next, r, rho, alpha, beta, gamma, lam):
    """Raw GES(lambda) update; returns ``(theta, omega, trace)``.

    e      <- lambda gamma rho e + phi
    delta  <- r + gamma theta.phi_next - theta.phi
    omega' <- omega + beta (e delta - phi phi.omega)
    theta' <- theta - alpha (gamma phi_next - phi) e.omega      (pre-update omega)

    ``theta``/``omega`` may carry leading batch axes; ``alpha``/``beta`` then
    broadcast against those axes.  ``trace`` is unbatched.
    """
    trace = (lam * gamma * rho) * trace + phi
    d = gamma * phi_next - phi
    delta = theta @ d + r
    e_dot_w = omega @ trace
    phi_dot_w = omega @ phi
    alpha = np.asarray(alpha)
    beta = np.asarray(beta)
    if alpha.ndim:
        alpha, beta = alpha[..., None], beta[..., None]
    new_omega = omega + beta * (delta[..., None] * trace - phi_dot_w[..., None] * phi)
    new_theta = theta - (alpha * e_dot_w[..., None]) * d
    return new_theta, new_omega, trace


def _check_finite(state: LearnerState) -> LearnerState:
    bad = ~(np.isfinite(state.theta).all() and np.isfinite(state.omega).all())
    if bad or max(np.max(np.abs(state.theta)), np.max(np.abs(state.omega))) > DIVERGENCE_LIMIT:
        if not state.diverged:
            state.diverged = True
            state.diverged_at = state.t
    return state


def ges_step(state: LearnerState, tr: Transition, alpha: float, beta: float, gamma: float, lam: float) -> LearnerState:
    """One step of stochastic GES(lambda) on a single parameter pair."""
    if alpha <= 0 or beta <= 0:
        raise ValueError("step sizes must be positive")
    if len(tr.phi) != state.p or len(tr.expected_phi_next) != state.p:
        raise ValueError("transition features do not match the parameter dimension")
    phi_next = np.zeros(state.p) if tr.terminal else tr.expected_phi_next
    with np.errstate(over="ignore", invalid="ignore"):
        theta, omega, trace = ges_update(
            state.theta, state.omega, state.trace, tr.phi, phi_next, tr.r, tr.rho, alpha, beta, gamma, lam
        )
    if tr.terminal or tr.episode_end:
        trace = np.zeros_like(trace)
    new = LearnerState(theta, omega, trace, state.t + 1, state.diverged, state.diverged_at)
    return _check_finite(new)


def expected_saddle_step(state: LearnerState, km: KeyMatrices, alpha: float, beta: float) -> LearnerState:
    """Deterministic primal-dual step with the exact key matrices.

    omega' = omega + beta (A theta + b - M omega);  theta' = theta - alpha A^T omega.
    """
    if km.provenance != "analytic":
        raise ValueError("expected iteration needs analytic key matrices")
    if state.theta.shape[-1] != km.p:
        raise ValueError("dimension mismatch")
    omega = state.omega + beta * (km.A @ state.theta + km.b - km.M @ state.omega)
    theta = state.theta - alpha * (km.A.T @ state.omega)
    return replace(state, theta=theta, omega=omega, t=state.t + 1)


def offline_expected_step(theta, km: KeyMatrices, alpha: float) -> np.ndarray:
    """theta + alpha (A theta + b): the mean of the off-line lambda-return update."""
    theta = np.asarray(theta, dtype=float)
    return theta + alpha * (km.A @ theta + km.b)


# -- step sizes -----------------------------------------------------------------


@dataclass(frozen=True)
class StepSizeSchedule:
    """Step-size rule.

    kinds:
      ``constant``      alpha_t = alpha0, beta_t = beta0
      ``inverse-sqrt``  alpha_t = alpha0 / sqrt(t), beta_t = beta0 / sqrt(t)  (t counted from 1)
      ``theorem2``      the constant rates from :class:`RateConstants`
      ``appendixE``     alpha_t = beta_t = 2 / (C sqrt(5 t))
    ``alpha0``/``beta0`` may be arrays, giving one schedule per grid cell.
    """

    kind: str
    alpha0: object = None
    beta0: object = None
    C: float | None = None

    def rates(self, t: int):
        """(alpha_t, beta_t) for the t-th update, t >= 1."""
        if t < 1:
            raise ValueError("steps are counted from 1")
        if self.kind in ("constant", "theorem2"):
            return self.alpha0, self.beta0
        if self.kind == "inverse-sqrt":
            s = 1.0 / math.sqrt(t)
            return np.multiply(self.alpha0, s), np.multiply(self.beta0, s)
        if self.kind == "appendixE":
            a = 2.0 / (self.C * math.sqrt(5.0 * t))
            return a, a
        raise ValueError(f"unknown schedule kind {self.kind!r}")

    @property
    def ratio(self):
        if self.kind == "appendixE":
            return 1.0
        return np.divide(self.beta0, self.alpha0)


def make_schedule(kind: str, **params) -> StepSizeSchedule:
    """Build a schedule; see :class:`StepSizeSchedule` for the accepted kinds.

    constant / inverse-sqrt: ``alpha`` plus either ``beta`` or ``ratio`` (beta/alpha).
    theorem2: ``constants`` (a :class:`RateConstants`).
    appendixE: ``C``.
    """
    if kind in ("constant", "inverse-sqrt"):
        if "alpha" not in params:
            raise ValueError(f"{kind} schedule needs alpha")
        alpha = np.asarray(params["alpha"], dtype=float)
        if "beta" in params:
            beta = np.asarray(params["beta"], dtype=float)
        elif "ratio" in params:
            beta = alpha * np.asarray(params["ratio"], dtype=float)
        else:
            raise ValueError(f"{kind} schedule needs beta or ratio")
        if np.any(alpha <= 0) or np.any(beta <= 0):
            raise ValueError("step sizes must be positive")
        if alpha.ndim == 0:
            alpha, beta = float(alpha), float(beta)
        return StepSizeSchedule(kind, alpha, beta)
    if kind == "theorem2":
        rc = params.get("constants")
        if not isinstance(rc, RateConstants):
            raise ValueError("theorem2 schedule needs RateConstants")
        return StepSizeSchedule(kind, rc.alpha_star, rc.beta_star)
    if kind == "appendixE":
        C = params.get("C")
        if C is None or C <= 0:
            raise ValueError("appendixE schedule needs a positive constant C")
        return StepSizeSchedule(kind, C=float(C))
    raise ValueError(f"unknown schedule kind {kind!r}")


def step_size_grid(js=range(-10, 1), base: float = 0.1) -> np.ndarray:
    return np.array([base * 2.0**j for j in js])


def gap_rate_constant(
    radius_theta: float, radius_omega: float, phi_max: float, reward_max: float,
    rho_max: float, gamma: float, lam: float, p: int,
) -> float:
    """C = 4 diam(D_w)^2 C1^2 + diam(D_theta)^2 C2^2 from estimator norm bounds.

    C1^2 = C_b^2 + C_A^2 diam(D_theta)^2 + C_M^2 diam(D_w)^2 and C2^2 = C_A^2 diam(D_w)^2.
    """
    decay = gamma * lam * rho_max
    if decay >= 1.0:
        raise ValueError("needs gamma*lambda*rho_max < 1 for bounded traces")
    C_e = phi_max / (1.0 - decay)
    C_b = reward_max * C_e
    C_A = (gamma + 1.0) * C_e * phi_max
    C_M = p * math.sqrt(p) * phi_max**2
    dt, dw = 2.0 * radius_theta, 2.0 * radius_omega
    C1sq = C_b**2 + C_A**2 * dt**2 + C_M**2 * dw**2
    C2sq = C_A**2 * dw**2
    return 4.0 * dw**2 * C1sq + dt**2 * C2sq


# -- diagnostics ------------------------------------------------------------------


@dataclass
class Diagnostics:
    """What to measure during a run; every field is optional."""

    km: KeyMatrices | None = None
    theta_star: np.ndarray | None = None
    rates: RateConstants | None = None
    lyapunov: LyapunovSystem | None = None
    pinv: bool = False

    def omega_star(self):
        return np.zeros_like(self.theta_star)

    @property
    def M_inverse(self) -> np.ndarray:
        """(Pseudo-)inverse of M, computed once per run."""
        if getattr(self, "_Minv", None) is None:
            if self.pinv:
                self._Minv = np.linalg.pinv(self.km.M, rcond=1e-10, hermitian=True)
            else:
                self._Minv = np.linalg.inv(self.km.M)
        return self._Minv


@dataclass
class DiagnosticSeries:
    stride: int
    steps: list = field(default_factory=list)
    mspbe: list = field(default_factory=list)
    D: list = field(default_factory=list)
    lyapunov: list = field(default_factory=list)
    z_sq: list = field(default_factory=list)
    theta: list = field(default_factory=list)
    omega: list = field(default_factory=list)

    def as_arrays(self) -> dict:
        return {k: np.array(v) for k, v in self.__dict__.items() if k != "stride"}

    def record(self, t: int, state: LearnerState, diag: Diagnostics | None) -> None:
        self.steps.append(t)
        self.theta.append(np.array(state.theta))
        self.omega.append(np.array(state.omega))
        if diag is None or diag.km is None:
            return
        km = diag.km
        with np.errstate(over="ignore", invalid="ignore"):
            self.mspbe.append(mspbe_batch(km, state.theta, pinv=diag.pinv, Minv=diag.M_inverse))
            if diag.theta_star is not None and diag.rates is not None:
                self.D.append(d_measure(km, diag.rates.nu, state.theta, state.omega, diag.theta_star))
            if diag.theta_star is not None and diag.lyapunov is not None:
                z = lyapunov_state(km, state.theta, state.omega, diag.theta_star, diag.omega_star())
                self.z_sq.append(np.sum(z * z, axis=-1))
                self.lyapunov.append(np.einsum("...i,ij,...j->...", z, diag.lyapunov.Q, z))


def d_measure(km: KeyMatrices, nu: float, theta, omega, theta_star) -> np.ndarray:
    """nu ||theta - theta*||^2 + ||omega - M^-1 (A theta + b)||^2 (batched over leading axes)."""
    theta = np.asarray(theta, float)
    target = np.linalg.solve(km.M, (theta @ km.A.T + km.b).T).T
    return nu * np.sum((theta - theta_star) ** 2, axis=-1) + np.sum((omega - target) ** 2, axis=-1)


def _mark_divergence(theta, omega, t, dead, diverged_at):
    mag = np.maximum(np.max(np.abs(theta), axis=-1), np.max(np.abs(omega), axis=-1))
    newly = ~dead & ~(mag <= DIVERGENCE_LIMIT)
    if np.any(newly):
        diverged_at = np.where(newly, t, diverged_at)
        dead = dead | newly
    return dead, diverged_at


def run_episodes(
    stream: Iterable[Transition],
    schedule: StepSizeSchedule,
    gamma: float,
    lam: float,
    p: int,
    stride: int = 100,
    diagnostics: Diagnostics | None = None,
    state: LearnerState | None = None,
    max_steps: int | None = None,
) -> tuple[LearnerState, DiagnosticSeries]:
    """Drive GES(lambda) over a transition stream.

    Parameters start at zero unless ``state`` is given.  When the schedule's
    rates are arrays the run is batched: one parameter pair per grid cell.
    A batched run stops early only when every cell has diverged; a single
    run stops at its divergence.  Divergence is checked every 8 updates, at
    recording steps and at the end, so ``diverged_at`` is the first check
    past the limit.  Diagnostics are recorded at step 0,
    every ``stride`` updates, and after the final update.
    """
    alpha0, _ = schedule.rates(1)
    batch = np.shape(alpha0)
    if state is None:
        state = LearnerState.zeros(p, batch)
    theta, omega, trace = state.theta, state.omega, state.trace
    t = state.t
    series = DiagnosticSeries(stride)
    dead = np.zeros(batch, dtype=bool)
    diverged_at = np.full(batch, -1)
    series.record(t, state, diagnostics)
    zeros = np.zeros(p)
    last_recorded = t
    with np.errstate(over="ignore", invalid="ignore"):
        for tr in stream:
            if max_steps is not None and t - state.t >= max_steps:
                break
            a, b = schedule.rates(t + 1)
            phi_next = zeros if tr.terminal else tr.expected_phi_next
            theta, omega, trace = ges_update(theta, omega, trace, tr.phi, phi_next, tr.r, tr.rho, a, b, gamma, lam)
            if tr.terminal or tr.episode_end:
                trace = np.zeros(p)
            t += 1
            if t % 8 == 0 or t % stride == 0:
                dead, diverged_at = _mark_divergence(theta, omega, t, dead, diverged_at)
                if t % stride == 0:
                    series.record(t, LearnerState(theta, omega, trace, t), diagnostics)
                    last_recorded = t
                if np.all(dead):
                    break
    dead, diverged_at = _mark_divergence(theta, omega, t, dead, diverged_at)
    final = LearnerState(theta, omega, trace, t)
    if last_recorded != t:
        series.record(t, final, diagnostics)
    if batch == ():
        final.diverged = bool(dead)
        final.diverged_at = int(diverged_at) if dead else None
    else:
        final.diverged = dead
        final.diverged_at = diverged_at
    return final, series


# -- averaged iterates and primal-dual gap ------------------------------------------


def averaged_iterates(thetas, omegas, weights) -> tuple[np.ndarray, np.ndarray]:
    """Step-size weighted averages sum(a_t x_t) / sum(a_t)."""
    thetas = np.asarray(thetas, float)
    omegas = np.asarray(omegas, float)
    w = np.asarray(weights, float)
    if thetas.shape[0] == 0:
        raise ValueError("no iterates to average")
    if not (len(w) == len(thetas) == len(omegas)):
        raise ValueError("need one weight per iterate")
    return w @ thetas / w.sum(), w @ omegas / w.sum()


def run_averaged(stream, schedule: StepSizeSchedule, gamma: float, lam: float, p: int, checkpoints):
    """GES(lambda) from zero, returning step-size weighted averages at each checkpoint step.

    Every iterate enters the average with the weight of the step that
    produced it.  Returns ``(steps, theta_avg, omega_avg)`` stacked over the
    checkpoints that were reached.
    """
    checkpoints = sorted(set(int(c) for c in checkpoints))
    theta, omega, trace = np.zeros(p), np.zeros(p), np.zeros(p)
    sum_w, sum_th, sum_om = 0.0, np.zeros(p), np.zeros(p)
    zeros = np.zeros(p)
    out_steps, out_th, out_om = [], [], []
    t, k = 0, 0
    for tr in stream:
        if k == len(checkpoints):
            break
        a, b = schedule.rates(t + 1)
        phi_next = zeros if tr.terminal else tr.expected_phi_next
        theta, omega, trace = ges_update(theta, omega, trace, tr.phi, phi_next, tr.r, tr.rho, a, b, gamma, lam)
        if tr.terminal or tr.episode_end:
            trace = np.zeros(p)
        t += 1
        sum_w += a
        sum_th += a * theta
        sum_om += a * omega
        if t == checkpoints[k]:
            out_steps.append(t)
            out_th.append(sum_th / sum_w)
            out_om.append(sum_om / sum_w)
            k += 1
    return np.array(out_steps), np.array(out_th), np.array(out_om)


class DomainError(ValueError):
    """The saddle point is outside the declared parameter balls."""


def _ball_max_concave(c: np.ndarray, M: np.ndarray, radius: float) -> np.ndarray:
    """argmax_{||w|| <= radius} c.w - 0.5 w^T M w for symmetric positive definite M."""
    w = np.linalg.solve(M, c)
    if np.linalg.norm(w) <= radius:
        return w
    # boundary solution w(mu) = (M + mu I)^-1 c with ||w(mu)|| = radius
    evals, evecs = np.linalg.eigh(M)
    ct = evecs.T @ c

    def norm_at(mu):
        return math.sqrt(float(np.sum((ct / (evals + mu)) ** 2)))

    lo, hi = 0.0, max(1.0, float(np.linalg.norm(c)) / radius)
    while norm_at(hi) > radius:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if norm_at(mid) > radius:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(1.0, hi):
            break
    w = evecs @ (ct / (evals + hi))
    return w * min(1.0, radius / np.linalg.norm(w))


def primal_dual_gap(km: KeyMatrices, theta, omega, radius_theta: float, radius_omega: float,
                    theta_star=None) -> float:
    """max_{||w'|| <= R_w} Psi(theta, w') - min_{||th'|| <= R_th} Psi(th', omega).

    Psi(th, w) = (A th + b).w - 0.5 w^T M w, over origin-centred balls that must
    contain the saddle point (theta*, 0).
    """
    theta, omega = np.asarray(theta, float), np.asarray(omega, float)
    if theta_star is None:
        theta_star = np.linalg.solve(km.A, -km.b)
    if np.linalg.norm(theta_star) > radius_theta:
        raise DomainError(
            f"theta* has norm {np.linalg.norm(theta_star):.4g} > radius_theta={radius_theta}; use larger radii"
        )
    w_best = _ball_max_concave(km.A @ theta + km.b, km.M, radius_omega)
    upper = saddle_objective(km, theta, w_best)
    g = km.A.T @ omega
    gn = float(np.linalg.norm(g))
    lower = -radius_theta * gn + float(km.b @ omega) - 0.5 * float(omega @ km.M @ omega)
    return upper - lower


def mspbe_dual_value(km: KeyMatrices, theta) -> float:
    """Psi(theta, argmax_w Psi(theta, w)), equal to MSPBE(theta)."""
    return saddle_objective(km, theta, dual_maximiser(km, theta))
