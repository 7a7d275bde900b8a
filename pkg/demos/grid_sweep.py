"""A small step-size sweep on Two-State, written to ./demo_results.

The full 11 x 11 grid over 5 seeds is ``gesarsa sweep`` with a config file;
this keeps to a 4 x 4 corner so it finishes in about a minute.
"""
import numpy as np

from gesarsa.harness import ExperimentConfig, emit_results, summary, sweep

config = ExperimentConfig(
    environment="two-state",
    overrides={"reward": [[0.0, 1.0], [0.0, 0.0]]},
    gamma=0.99,
    lam=0.5,
    alpha_js=(-6, -4, -2, 0),
    ratio_js=(-6, -4, -2, 0),
    n_runs=2,
    n_episodes=1000,
    stride=1000,
    output_dir="demo_results",
)
records = sweep(config, workers=1)
files = emit_results(records, config.output_dir)

table = np.full((4, 4), np.nan)
for r in records:
    if r.seed == 0:
        i = config.alphas.tolist().index(r.alpha)
        j = config.ratios.tolist().index(r.beta_over_alpha)
        table[i, j] = np.inf if r.diverged else r.series["mspbe"][-1]
np.set_printoptions(precision=2)
print("final MSPBE, seed 0 (rows alpha, columns beta/alpha)")
print(table)
for row in summary(records):
    print(row)
print("wrote", *sorted(str(f) for f in files.values()))
