"""Two-State counterexample: the expected off-line lambda-return update blows up.

The target always moves right, the behaviour flips a coin.  On this problem
the first coordinate of theta evolves on its own with per-step factor
1 + alpha * c, and c changes sign at gamma = 5 / (6 - lambda).
"""
import numpy as np

from gesarsa.harness import divergence_demo, two_state_eigenvalue

lam, alpha = 0.99, 0.1
print(f"sign change of c at gamma = 5 / (6 - {lam}) = {5 / (6 - lam):.6f}")

for gamma in (0.9, 0.99, 0.999):
    demo = divergence_demo(gamma, lam, alpha, t_max=3000)
    print(f"gamma={gamma:<6} c={demo.c:+.6f} (closed form {two_state_eigenvalue(gamma, lam):+.6f}) "
          f"factor={demo.factor:.6f} regime={demo.regime}")
    print(f"    |theta_1| after 0/1000/3000 steps: {demo.series[0]:.3g} {demo.series[1000]:.3g} {demo.series[-1]:.3g}")

demo = divergence_demo(0.999, lam, alpha)
print(f"crossing 1e6 at step {demo.crossing_step}, predicted {demo.predicted_crossing}")

# the second coordinate alone is harmless: its eigenvalue is negative
demo = divergence_demo(0.999, lam, alpha, t_max=200, theta0=(0.0, 1.0))
print("starting at (0, 1) keeps theta_1 at", np.unique(demo.series))
