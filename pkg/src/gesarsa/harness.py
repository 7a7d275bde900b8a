"""Experiment orchestration: configs, sweeps, Monte-Carlo estimators, result files.

Seeds are ``base_seed + run_index`` and feed numpy's Philox generator, a
counter-based bit generator whose output does not depend on platform.
Within one seed every grid cell sees the same behaviour trajectory (the
stream does not depend on the parameters), so a seed's cells are driven
together as one batched run.  This is the same computation as running each
cell in isolation with that seed.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .analysis import (
    HurwitzError,
    KeyMatrices,
    SolvabilityError,
    key_matrices,
    lyapunov_system,
    rate_constants,
    stability_check,
    td_fixed_point,
)
from .environments import MountainCarEnv, TabularEnv, TwoStateSpec, make_env, make_spec
from .learners import Diagnostics, make_schedule, offline_expected_step, run_episodes
from .mdp import state_action_transition, stationary_distribution

SCHEMA_VERSION = 1
GRID_JS = tuple(range(-10, 1))
GRID_BASE = 0.1
OUTPUT_DIR_ENV = "GESARSA_OUTPUT_DIR"
MAX_WORKERS_ENV = "GESARSA_MAX_WORKERS"
CSV_COLUMNS = (
    "env", "lambda", "gamma", "alpha", "beta_over_alpha", "seed", "step",
    "mspbe", "mse", "D_t", "lyapunov", "diverged",
)


def rng_for(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


# -- configuration ----------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment.  Grid axes are exponents j of ``0.1 * 2**j``, j in -10..0.

    ``alpha_js`` indexes alpha and ``ratio_js`` indexes beta/alpha.
    ``lam``/``gamma`` override the environment's own values when given.
    ``km_episodes`` sizes the Monte-Carlo key matrices used for environments
    without an exact tabular model.  ``mse_rollouts`` > 0 adds a simulated
    MSE at the final parameters of every run.
    """

    environment: str = "two-state"
    overrides: dict = field(default_factory=dict)
    lam: float | None = None
    gamma: float | None = None
    schedule: str = "constant"
    alpha_js: tuple = GRID_JS
    ratio_js: tuple = GRID_JS
    n_runs: int = 5
    n_episodes: int = 5000
    base_seed: int = 0
    stride: int = 100
    output_dir: str = "results"
    km_episodes: int = 5000
    mse_rollouts: int = 0

    def __post_init__(self):
        object.__setattr__(self, "alpha_js", tuple(int(j) for j in self.alpha_js))
        object.__setattr__(self, "ratio_js", tuple(int(j) for j in self.ratio_js))
        object.__setattr__(self, "overrides", dict(self.overrides))
        for name in ("alpha_js", "ratio_js"):
            js = getattr(self, name)
            if not js:
                raise ValueError(f"{name} is empty")
            bad = [j for j in js if j not in GRID_JS]
            if bad:
                raise ValueError(f"{name} values {bad} are outside the grid exponents -10..0")
        if self.n_runs < 1:
            raise ValueError("n_runs must be at least 1")
        if self.n_episodes < 1 or self.stride < 1:
            raise ValueError("n_episodes and stride must be positive")
        if self.schedule not in ("constant", "inverse-sqrt"):
            raise ValueError(f"sweep schedules are 'constant' or 'inverse-sqrt', got {self.schedule!r}")

    @property
    def alphas(self) -> np.ndarray:
        return np.array([GRID_BASE * 2.0**j for j in self.alpha_js])

    @property
    def ratios(self) -> np.ndarray:
        return np.array([GRID_BASE * 2.0**j for j in self.ratio_js])

    @property
    def seeds(self) -> list[int]:
        return [self.base_seed + i for i in range(self.n_runs)]

    def spec(self):
        over = dict(self.overrides)
        if self.lam is not None:
            over["lam"] = self.lam
        if self.gamma is not None:
            over["gamma"] = self.gamma
        return make_spec(self.environment, **over)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["alpha_js"] = list(self.alpha_js)
        d["ratio_js"] = list(self.ratio_js)
        return {"schema_version": SCHEMA_VERSION, **d}

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, default=_jsonable)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        version = doc.pop("schema_version", None)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema_version {version!r} (expected {SCHEMA_VERSION})")
        if "lambda" in doc:
            doc["lam"] = doc.pop("lambda")
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        for k in ("alpha_js", "ratio_js"):
            if k in doc:
                doc[k] = tuple(doc[k])
        if doc.get("overrides") is None:
            doc["overrides"] = {}
        return cls(**doc)


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (tuple, set, frozenset)):
        return list(x)
    return str(x)


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config must be a key-value document")
    return ExperimentConfig.from_dict(doc)


def save_config(path: str | Path, config: ExperimentConfig) -> None:
    d = config.to_dict()
    d["lambda"] = d.pop("lam")
    with open(path, "w") as fh:
        yaml.safe_dump(json.loads(json.dumps(d, default=_jsonable)), fh, sort_keys=False)


def output_dir(config: ExperimentConfig) -> Path:
    return Path(os.environ.get(OUTPUT_DIR_ENV) or config.output_dir)


def max_workers() -> int:
    raw = os.environ.get(MAX_WORKERS_ENV)
    if not raw:
        return 1
    n = int(raw)
    if n < 1:
        raise ValueError(f"{MAX_WORKERS_ENV} must be a positive integer")
    return n


# -- records ------------------------------------------------------------------------


@dataclass
class RunRecord:
    config_hash: str
    config: dict
    env: str
    lam: float
    gamma: float
    alpha: float
    beta_over_alpha: float
    seed: int
    series: dict
    theta: np.ndarray
    omega: np.ndarray
    diverged: bool
    diverged_at: int | None
    wall_time: float
    mse: float = float("nan")
    mse_normalized: bool = True

    @property
    def key(self) -> tuple:
        return (self.config_hash, self.seed, self.alpha, self.beta_over_alpha)


# -- Monte-Carlo estimation ---------------------------------------------------------


def empirical_key_matrices(env, n_episodes: int, rng: np.random.Generator) -> KeyMatrices:
    """Running means of A_t = e_t (gamma phi_bar' - phi)^T, b_t = r e_t, M_t = phi phi^T.

    The trace follows the learner: it decays by gamma lambda rho and is
    cleared at terminal and episode boundaries.  Only the columns where the
    sparse increment is nonzero are touched, so tile-coded features stay cheap.
    """
    gamma, lam = env.spec.gamma, env.spec.lam
    p = env.p
    A = np.zeros((p, p))
    b = np.zeros(p)
    M = np.zeros((p, p))
    e = np.zeros(p)
    n = 0
    sparse = p > 64
    decay = gamma * lam
    for tr in env.stream(n_episodes, rng):
        e = (decay * tr.rho) * e + tr.phi
        d = (gamma * tr.expected_phi_next - tr.phi) if not tr.terminal else -tr.phi
        if sparse:
            cols = np.flatnonzero(d)
            A[:, cols] += np.outer(e, d[cols])
            act = np.flatnonzero(tr.phi)
            M[np.ix_(act, act)] += np.outer(tr.phi[act], tr.phi[act])
        else:
            A += np.outer(e, d)
            M += np.outer(tr.phi, tr.phi)
        if tr.r != 0.0:
            b += tr.r * e
        n += 1
        if tr.terminal or tr.episode_end:
            e = np.zeros(p)
    if n == 0:
        raise ValueError("empty transition stream")
    M = M / n
    return KeyMatrices(A / n, b / n, 0.5 * (M + M.T), lam, gamma, provenance="monte-carlo", n_samples=n)


def mse_ratio(values, q, xi) -> tuple[float, bool]:
    """||values - q||^2_xi / ||q||^2_xi, or ||values||^2_xi with flag False when q is ~0."""
    values, q, xi = (np.asarray(x, float) for x in (values, q, xi))
    denom = float(np.sum(xi * q * q))
    err = float(np.sum(xi * (values - q) ** 2))
    if denom <= 1e-24:
        return float(np.sum(xi * values * values)), False
    return err / denom, True


def min_horizon(gamma: float, tail: float = 1e-6) -> int:
    return int(math.ceil(math.log(tail) / math.log(gamma)))


@dataclass
class MseEstimate:
    value: float
    normalized: bool
    q_hat: np.ndarray
    weights: np.ndarray


def _tabular_q_hat(env: TabularEnv, n_rollouts: int, horizon: int, rng) -> np.ndarray:
    """Per-pair mean discounted target-policy return, all rollouts simulated in parallel."""
    mdp, pi = env.mdp, env.pi
    pi_cdf = np.cumsum(pi.probs, axis=1)
    p_cdf = np.cumsum(mdp.transition, axis=2)
    terminal = np.zeros(mdp.n_states, dtype=bool)
    terminal[list(mdp.terminal)] = True
    q = np.zeros(mdp.n_pairs)
    for idx, (s0, a0) in enumerate(mdp.pairs):
        s = np.full(n_rollouts, s0)
        a = np.full(n_rollouts, a0)
        alive = np.ones(n_rollouts, dtype=bool)
        g = np.zeros(n_rollouts)
        disc = 1.0
        for _ in range(horizon):
            g += np.where(alive, disc * mdp.reward[s, a], 0.0)
            u = rng.random((2, n_rollouts))
            s_next = np.minimum((u[0][:, None] > p_cdf[s, a]).sum(axis=1), mdp.n_states - 1)
            alive &= ~terminal[s_next]
            s = s_next
            a = np.minimum((u[1][:, None] > pi_cdf[s]).sum(axis=1), mdp.n_actions - 1)
            disc *= mdp.gamma
            if not alive.any():
                break
        q[idx] = g.mean()
    return q


def empirical_mse(theta, env, n_rollouts: int, horizon: int, rng: np.random.Generator,
                  pairs=None, weights=None) -> MseEstimate:
    """Simulated ||Phi theta - q||^2_xi / ||q||^2_xi with q estimated from target-policy rollouts.

    Tabular environments use every state-action pair weighted by the
    behaviour stationary distribution.  MountainCar needs ``pairs``
    (state, action) sampled from the behaviour distribution; they are then
    weighted uniformly unless ``weights`` is given.  When the estimated q is
    numerically zero the ratio is undefined and the unnormalised
    ||Phi theta||^2_xi is returned with ``normalized=False``.
    """
    gamma = env.spec.gamma
    if horizon < math.log(1e-6) / math.log(gamma):
        raise ValueError(f"horizon {horizon} leaves a discount tail above 1e-6; need >= {min_horizon(gamma)}")
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be positive")
    theta = np.asarray(theta, float)
    if isinstance(env, TabularEnv):
        xi = stationary_distribution(env.mdp, env.mu).xi if weights is None else np.asarray(weights, float)
        q = _tabular_q_hat(env, n_rollouts, horizon, rng)
        values = env.features.matrix @ theta
    else:
        if pairs is None:
            raise ValueError("MountainCar MSE needs sampled (state, action) pairs")
        xi = np.full(len(pairs), 1.0 / len(pairs)) if weights is None else np.asarray(weights, float)
        q = np.array([
            np.mean([env.target_rollout_return(s, a, horizon, rng) for _ in range(n_rollouts)])
            for s, a in pairs
        ])
        values = np.array([env.features(s, a) @ theta for s, a in pairs])
    value, normalized = mse_ratio(values, q, xi)
    return MseEstimate(value, normalized, q, xi)


def exact_q(mdp, pi) -> np.ndarray:
    """(I - gamma P^pi)^-1 R at pair level."""
    P = state_action_transition(mdp, pi)
    return np.linalg.solve(np.eye(mdp.n_pairs) - mdp.gamma * P, mdp.reward_vector())


def sample_pairs(env: MountainCarEnv, n_pairs: int, rng) -> list:
    """Behaviour-distributed (state, action) pairs from consecutive episodes, evenly thinned."""
    seen = []
    for tr in env.stream(max(1, n_pairs // 50 + 1), rng):
        seen.append((tr.s, tr.a))
    idx = np.linspace(0, len(seen) - 1, min(n_pairs, len(seen))).astype(int)
    return [seen[i] for i in idx]


# -- a single configured run ----------------------------------------------------------


@dataclass
class _Setup:
    spec: object
    env: object
    km: KeyMatrices
    diagnostics: Diagnostics
    q: np.ndarray | None


def _setup(config: ExperimentConfig) -> _Setup:
    spec = config.spec()
    env = make_env(spec)
    if isinstance(env, TabularEnv):
        km = key_matrices(env.mdp, env.pi, env.mu, env.features, spec.lam)
        singular = env.features.rank() < env.p
        theta_star = td_fixed_point(km, allow_singular=singular)
        rates = lyap = None
        if not singular and stability_check(km).stable:
            try:
                rates = rate_constants(km)
                lyap = lyapunov_system(km)
            except (SolvabilityError, HurwitzError):
                pass
        diag = Diagnostics(km, theta_star, rates, lyap, pinv=singular)
        q = exact_q(env.mdp, env.pi)
    else:
        # the key-matrix sample uses its own generator so it is shared by all seeds
        km = empirical_key_matrices(env, config.km_episodes, rng_for(config.base_seed + 10**6))
        diag = Diagnostics(km, None, None, None, pinv=True)
        q = None
    return _Setup(spec, env, km, diag, q)


def _mse_series(setup: _Setup, thetas: np.ndarray) -> tuple[np.ndarray, bool]:
    if setup.q is None:
        return np.full(thetas.shape[:-1], np.nan), True
    xi = stationary_distribution(setup.env.mdp, setup.env.mu).xi
    values = thetas @ setup.env.features.matrix.T
    denom = float(np.sum(xi * setup.q**2))
    if denom <= 1e-24:
        return np.sum(xi * values**2, axis=-1), False
    return np.sum(xi * (values - setup.q) ** 2, axis=-1) / denom, True


def _run_seed(config: ExperimentConfig, seed: int) -> list[RunRecord]:
    """All grid cells for one seed as a single batched run."""
    setup = _setup(config)
    spec = setup.spec
    alphas, ratios = config.alphas, config.ratios
    a_grid, r_grid = np.meshgrid(alphas, ratios, indexing="ij")
    schedule = make_schedule(config.schedule, alpha=a_grid.ravel(), ratio=r_grid.ravel())
    start = time.perf_counter()
    stream = setup.env.stream(config.n_episodes, rng_for(seed))
    final, series = run_episodes(stream, schedule, spec.gamma, spec.lam, setup.env.p,
                                 stride=config.stride, diagnostics=setup.diagnostics)
    wall = (time.perf_counter() - start) / a_grid.size
    arrays = series.as_arrays()
    thetas = arrays["theta"]
    with np.errstate(over="ignore", invalid="ignore"):
        mse, normalized = _mse_series(setup, thetas)
    chash, cdict = config.config_hash(), config.to_dict()
    n_steps = len(arrays["steps"])
    records = []
    for c in range(a_grid.size):
        cell = {
            "steps": arrays["steps"],
            "theta": thetas[:, c],
            "omega": arrays["omega"][:, c],
            "mspbe": arrays["mspbe"][:, c] if arrays["mspbe"].size else np.full(n_steps, np.nan),
            "D_t": arrays["D"][:, c] if arrays["D"].size else np.full(n_steps, np.nan),
            "lyapunov": arrays["lyapunov"][:, c] if arrays["lyapunov"].size else np.full(n_steps, np.nan),
            "z_sq": arrays["z_sq"][:, c] if arrays["z_sq"].size else np.full(n_steps, np.nan),
            "mse": mse[:, c],
        }
        diverged = bool(final.diverged[c])
        rec = RunRecord(
            chash, cdict, config.environment, float(spec.lam), float(spec.gamma),
            float(a_grid.flat[c]), float(r_grid.flat[c]), seed, cell,
            final.theta[c].copy(), final.omega[c].copy(), diverged,
            int(final.diverged_at[c]) if diverged else None, wall,
            mse=float(mse[-1, c]), mse_normalized=normalized,
        )
        records.append(rec)
    if config.mse_rollouts > 0:
        _attach_simulated_mse(config, setup, records, seed)
    return records


def _attach_simulated_mse(config, setup, records, seed) -> None:
    rng = rng_for(seed + 2 * 10**6)
    horizon = min_horizon(setup.spec.gamma)
    pairs = None
    if isinstance(setup.env, MountainCarEnv):
        pairs = sample_pairs(setup.env, 20, rng)
    for rec in records:
        if rec.diverged:
            continue
        est = empirical_mse(rec.theta, setup.env, config.mse_rollouts, horizon, rng, pairs=pairs)
        rec.mse, rec.mse_normalized = est.value, est.normalized


def run(config: ExperimentConfig, seed: int | None = None) -> RunRecord:
    """One GES(lambda) run; the config's grid must be a single cell."""
    if len(config.alpha_js) != 1 or len(config.ratio_js) != 1:
        raise ValueError("a single run needs exactly one alpha exponent and one ratio exponent")
    return _run_seed(config, config.base_seed if seed is None else seed)[0]


def sweep(config: ExperimentConfig, workers: int | None = None, write: bool = True) -> list[RunRecord]:
    """Every grid cell for every seed.  Diverging cells are recorded, never fatal.

    Seeds run in separate processes when ``workers`` > 1 (default from
    ``GESARSA_MAX_WORKERS``).  With ``write`` each finished seed is written to
    ``<output>/parts/seed-<n>.csv`` as it completes; the returned records are
    ordered by (seed, alpha, ratio) whatever the execution order.
    """
    workers = max_workers() if workers is None else workers
    out = output_dir(config)
    parts = out / "parts"
    if write:
        parts.mkdir(parents=True, exist_ok=True)
    records: list[RunRecord] = []

    def done(seed, recs):
        records.extend(recs)
        if write:
            write_csv(parts / f"seed-{seed}.csv", recs)

    if workers <= 1 or len(config.seeds) == 1:
        for seed in config.seeds:
            done(seed, _run_seed(config, seed))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {seed: pool.submit(_run_seed, config, seed) for seed in config.seeds}
            for seed, fut in futures.items():
                done(seed, fut.result())
    records.sort(key=lambda r: (r.seed, r.alpha, r.beta_over_alpha))
    return records


# -- divergence demonstration -------------------------------------------------------------


@dataclass
class DivergenceDemo:
    gamma: float
    lam: float
    alpha: float
    c: float
    factor: float
    regime: str
    series: np.ndarray
    growth_ratios: np.ndarray
    crossing_step: int | None
    predicted_crossing: int | None
    threshold_gamma: float

    def report(self) -> dict:
        return {
            "gamma": self.gamma,
            "lambda": self.lam,
            "alpha": self.alpha,
            "regime": self.regime,
            "eigenvalue_c": self.c,
            "per_step_factor": self.factor,
            "divergence_threshold_gamma": self.threshold_gamma,
            "steps": int(len(self.series) - 1),
            "final_abs_theta1": float(self.series[-1]),
            "crossing_step_1e6": self.crossing_step,
            "predicted_crossing_step_1e6": self.predicted_crossing,
        }


def two_state_eigenvalue(gamma: float, lam: float) -> float:
    """Closed form of the first diagonal entry of A on Two-State with uniform pair weights.

    With pi always moving right, the first coordinate evolves on its own and
    this entry is the eigenvalue governing it.
    """
    k = gamma * lam
    return 0.25 * ((2 * gamma - 1) - 2 * (1 - gamma) * (2 + k) / (1 - k))


def divergence_demo(gamma: float, lam: float, alpha: float, t_max: int | None = None,
                    theta0=(1.0, 0.0), level: float = 1e6) -> DivergenceDemo:
    """Iterate the expected off-line update on zero-reward Two-State from ``theta0``."""
    spec = TwoStateSpec(gamma=gamma, lam=lam)
    env = TabularEnv(spec)
    km = key_matrices(env.mdp, env.pi, env.mu, env.features, lam)
    c = float(km.A[0, 0])
    factor = 1.0 + alpha * c
    threshold = 5.0 / (6.0 - lam)
    regime = "divergent" if gamma > threshold else "stable"
    predicted = None
    if factor > 1.0:
        predicted = int(math.ceil(math.log(level) / math.log(factor)))
    if t_max is None:
        t_max = predicted + 50 if predicted is not None else 2000
    theta = np.asarray(theta0, float)
    series = [abs(theta[0])]
    crossing = None
    for t in range(1, t_max + 1):
        theta = offline_expected_step(theta, km, alpha)
        series.append(abs(theta[0]))
        if crossing is None and series[-1] >= level:
            crossing = t
    series = np.array(series)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = series[1:] / series[:-1]
    return DivergenceDemo(gamma, lam, alpha, c, factor, regime, series, ratios, crossing, predicted, threshold)


# -- output ------------------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    return f"{float(x):.17g}"


def csv_rows(records) -> list[dict]:
    rows = []
    for rec in records:
        s = rec.series
        for i, step in enumerate(s["steps"]):
            rows.append({
                "env": rec.env,
                "lambda": rec.lam,
                "gamma": rec.gamma,
                "alpha": rec.alpha,
                "beta_over_alpha": rec.beta_over_alpha,
                "seed": rec.seed,
                "step": int(step),
                "mspbe": s["mspbe"][i],
                "mse": s["mse"][i],
                "D_t": s["D_t"][i],
                "lyapunov": s["lyapunov"][i],
                "diverged": rec.diverged_at is not None and step >= rec.diverged_at,
            })
    return rows


def write_csv(path: str | Path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for row in csv_rows(records):
            w.writerow([_fmt(row[c]) for c in CSV_COLUMNS])


def read_csv(path: str | Path) -> list[dict]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = {}
            for k, v in row.items():
                if k == "env":
                    parsed[k] = v
                elif k in ("seed", "step"):
                    parsed[k] = int(v)
                elif k == "diverged":
                    parsed[k] = v == "1"
                else:
                    parsed[k] = float(v)
            out.append(parsed)
    return out


def summary(records) -> list[dict]:
    """Best cell (lowest seed-mean final MSPBE) per (env, lambda, gamma) configuration."""
    groups: dict = {}
    for rec in records:
        groups.setdefault((rec.env, rec.lam, rec.gamma), {}).setdefault(
            (rec.alpha, rec.beta_over_alpha), []).append(rec)
    rows = []
    for (env, lam, gamma), cells in sorted(groups.items()):
        stats = []
        for (alpha, ratio), recs in cells.items():
            final = np.array([r.series["mspbe"][-1] if not r.diverged else np.inf for r in recs])
            mse = np.array([r.mse if not r.diverged else np.inf for r in recs])
            stats.append((float(np.mean(final)), float(np.mean(mse)), alpha, ratio, len(recs),
                          sum(r.diverged for r in recs), all(r.mse_normalized for r in recs)))
        best = min(stats, key=lambda s: (math.inf if math.isnan(s[0]) else s[0], s[2], s[3]))
        best_mse = min(stats, key=lambda s: (math.inf if math.isnan(s[1]) else s[1], s[2], s[3]))
        rows.append({
            "algorithm": "GES(lambda)",
            "env": env,
            "lambda": lam,
            "gamma": gamma,
            "best_alpha": best[2],
            "best_beta_over_alpha": best[3],
            "best_mspbe": best[0],
            "best_mse": best_mse[1],
            "mse_kind": "normalized" if best_mse[6] else "unnormalized (q is zero)",
            "n_cells": len(stats),
            "n_runs": best[4],
            "diverged_runs": sum(s[5] for s in stats),
        })
    return rows


def _plot(records, metric: str, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    by_cell: dict = {}
    for rec in records:
        by_cell.setdefault((rec.env, rec.lam, rec.gamma, rec.alpha, rec.beta_over_alpha), []).append(rec)
    best: dict = {}
    for key, recs in by_cell.items():
        score = np.mean([r.series["mspbe"][-1] if not r.diverged else np.inf for r in recs])
        group = key[:3]
        if group not in best or score < best[group][0]:
            best[group] = (score, key, recs)
    for group, (_, key, recs) in sorted(best.items()):
        steps = recs[0].series["steps"]
        ys = np.array([r.series[metric] for r in recs if len(r.series[metric]) == len(steps)])
        if ys.size == 0 or not np.isfinite(ys).any():
            continue
        ax.plot(steps, np.nanmean(ys, axis=0),
                label=f"{key[0]} lambda={key[1]:g} alpha={key[3]:.3g} beta/alpha={key[4]:.3g}")
    ax.set_xlabel("step")
    ax.set_ylabel(metric)
    ax.set_yscale("symlog", linthresh=1e-12)
    if ax.lines:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def emit_results(records, out_dir: str | Path, plots: bool = True) -> dict:
    """Write results.csv, checkpoints.npz, summary.csv/.txt and optional SVG plots."""
    records = list(records)
    if not records:
        raise ValueError("no records to emit")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise OSError(f"output directory {out} is not writable")
    files = {"csv": out / "results.csv", "checkpoints": out / "checkpoints.npz",
             "summary_csv": out / "summary.csv", "summary_txt": out / "summary.txt"}
    write_csv(files["csv"], records)
    np.savez(files["checkpoints"], **{
        f"r{i}_{name}": np.asarray(rec.series[name])
        for i, rec in enumerate(records) for name in ("steps", "theta", "omega")
    })
    rows = summary(records)
    cols = list(rows[0])
    with open(files["summary_csv"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r[c]) if not isinstance(r[c], str) else r[c] for c in cols])
    widths = {c: max(len(c), *(len(_short(r[c])) for r in rows)) for c in cols}
    with open(files["summary_txt"], "w") as fh:
        fh.write("  ".join(c.ljust(widths[c]) for c in cols) + "\n")
        for r in rows:
            fh.write("  ".join(_short(r[c]).ljust(widths[c]) for c in cols) + "\n")
    with open(out / "provenance.yaml", "w") as fh:
        yaml.safe_dump({"configs": {rec.config_hash: json.loads(json.dumps(rec.config, default=_jsonable))
                                    for rec in records}}, fh, sort_keys=True)
    if plots:
        for metric in ("mspbe", "mse", "D_t", "lyapunov"):
            path = out / f"{metric}.svg"
            _plot(records, metric, path)
            files[f"plot_{metric}"] = path
    return files


def _short(x) -> str:
    if isinstance(x, float):
        return f"{x:.4g}"
    return str(x)
