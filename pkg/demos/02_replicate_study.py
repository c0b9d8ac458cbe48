"""A small Monte Carlo replicate study.

Runs the panel-data design for a handful of replicates and prints the
aggregate table: mean estimate, empirical SE, mean estimated (cluster-robust)
SE, and 95% coverage per coefficient, for both the joint model and the
treatment-adjusted GEE comparator.

The full-size studies (500-1000 replicates) live in the acceptance suite and
behind `lem simulate --preset sim1 ...`; this demo keeps the replicate count
small so it finishes in under a minute.

Run:  python demos/02_replicate_study.py
"""

from lem import preset, run_study

summary = run_study(preset("sim1", seed=7), n_reps=50)
print(summary.to_table())

print("Reading the table: the joint model's mean estimates sit on the truth")
print("(0, 1, 1, 1, 1) with coverage near 0.95, and its mean estimated SE")
print("tracks the empirical SE; the naive comparator is biased wherever the")
print("covariate also drives treatment or modifies its effect.")
