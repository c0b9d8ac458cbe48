"""Ragged clusters: when variable follow-up is harmless and when it is not.

The pooled estimating equations stay valid when a subject's number of visits
is unrelated to the latent errors (completely random, or driven by observed
covariates).  When missingness depends on the *outcome*, cluster size is
informative and the estimator is knowingly inconsistent; the intercept
absorbs most of the damage.

Run:  python demos/03_missingness_regimes.py  (takes a minute or two)
"""

import numpy as np

from lem import preset, run_study

REPS = 40
for name, label in [
    ("sim1", "complete panels"),
    ("sim2", "completely random missingness"),
    ("sim3", "covariate-dependent missingness"),
    ("sim4", "outcome-dependent missingness"),
]:
    summary = run_study(preset(name, seed=11), n_reps=REPS)
    lem = summary.methods["lem"]
    bias = lem.mean_estimate - np.array([0.0, 1.0, 1.0, 1.0, 1.0])
    print(f"{label:34s} missing {summary.missing_rate:5.1%}  "
          f"bias(beta_0) {bias[0]:+.3f}  max|bias(beta_1..4)| {np.abs(bias[1:]).max():.3f}  "
          f"cp(beta_0) {lem.coverage[0]:.2f}")

print("\nThe first three regimes leave the estimates unbiased with near-nominal")
print("coverage; outcome-dependent deletion shifts beta_0 and drags its")
print("coverage well below 95% -- informative cluster size is a real limit of")
print("the pooled approach, not a bug.")
