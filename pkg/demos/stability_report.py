"""Stability of the expected update across (gamma, lambda) on Two-State and Baird's star."""
import numpy as np

from gesarsa.analysis import key_matrices, mspbe, stability_check, td_fixed_point
from gesarsa.environments import BairdStarSpec, TabularEnv, TwoStateSpec

print("Two-State: largest real part of eig(A)")
lams = (0.0, 0.5, 0.9, 0.99)
print("gamma   " + "".join(f"lam={l:<8}" for l in lams))
for gamma in (0.5, 0.8, 0.9, 0.95, 0.99, 0.999):
    row = []
    for lam in lams:
        env = TabularEnv(TwoStateSpec(gamma=gamma, lam=lam))
        rep = stability_check(key_matrices(env.mdp, env.pi, env.mu, env.features, lam))
        row.append(f"{rep.max_real_part:+.4f}{'*' if not rep.stable else ' '}  ")
    print(f"{gamma:<8}" + "".join(row))
print("(* = not Hurwitz: the off-line update diverges)")

env = TabularEnv(BairdStarSpec())
km = key_matrices(env.mdp, env.pi, env.mu, env.features, env.spec.lam)
print(f"\nBaird: {km.p} features of rank {env.features.rank()}, rank(A) = {np.linalg.matrix_rank(km.A)}")
theta = td_fixed_point(km, allow_singular=True)
print("minimum-norm fixed point", theta, "MSPBE", mspbe(km, theta, pinv=True))
print("MSPBE at theta = 1 (projected):", mspbe(km, np.ones(16), pinv=True))
