"""Deterministic primal-dual iteration at the prescribed constant rates.

D_t = nu ||theta - theta*||^2 + ||omega - M^-1 (A theta + b)||^2 should
shrink by at least the contraction factor each step.
"""
import numpy as np

from gesarsa.analysis import key_matrices, rate_constants, td_fixed_point
from gesarsa.environments import TabularEnv, TwoStateSpec
from gesarsa.learners import LearnerState, d_measure, expected_saddle_step

spec = TwoStateSpec(gamma=0.9, lam=0.99, reward=((0.0, 1.0), (0.0, 0.0)))
env = TabularEnv(spec)
km = key_matrices(env.mdp, env.pi, env.mu, env.features, spec.lam)
rc = rate_constants(km)
ts = td_fixed_point(km)
print(f"alpha*={rc.alpha_star:.5f} beta*={rc.beta_star:.5f} contraction={rc.contraction:.5f}")
print("theta* =", ts)

state = LearnerState(np.zeros(2), np.zeros(2), np.zeros(2))
D = [d_measure(km, rc.nu, state.theta, state.omega, ts)]
dist = [np.linalg.norm(state.theta - ts)]
for t in range(200):
    state = expected_saddle_step(state, km, rc.alpha_star, rc.beta_star)
    D.append(d_measure(km, rc.nu, state.theta, state.omega, ts))
    dist.append(np.linalg.norm(state.theta - ts))
D = np.array(D)
ratios = D[1:] / D[:-1]
print(f"mean ratio {ratios.mean():.4f}, max ratio {ratios.max():.4f}")
for t in (0, 25, 50, 100, 200):
    print(f"t={t:<4} D={D[t]:.3e} |theta - theta*|={dist[t]:.3e}")
