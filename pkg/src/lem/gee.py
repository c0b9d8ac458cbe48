"""Working-independence GEE comparator (linear mean, identity link).

Coefficients are pooled least squares; standard errors come from the
cluster-robust sandwich with subjects as clusters (bread X'X, meat the sum
of per-cluster X_i'r_i outer products).  No finite-sample correction is
applied to the sandwich.

Two variants: ``adjusted`` regresses on [X, A]; ``excluded`` drops treated
rows and regresses on X alone.  A three-level medication coding is supported
by the caller through pre-encoded dummy columns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import matrix_rank
from .errors import AllRowsExcluded, SingularDesign
from .likelihood import _fsum
from .numerics import solve_sym

VARIANTS = ("adjusted", "excluded")


@dataclass
class GeeFit:
    coef: np.ndarray
    cov_robust: np.ndarray
    n_subjects: int
    n_rows: int
    variant: str
    param_names: list

    def se_robust(self):
        return np.sqrt(np.diag(self.cov_robust))


def _exact_gram(design, y):
    """X'X and X'y with compensated sums, invariant to row ordering."""
    p = design.shape[1]
    gram = np.empty((p, p))
    rhs = np.empty(p)
    for j in range(p):
        for k in range(j, p):
            gram[j, k] = gram[k, j] = _fsum(design[:, j] * design[:, k])
        rhs[j] = _fsum(design[:, j] * y)
    return gram, rhs


def fit_gee_independence(dataset, variant="adjusted"):
    """Pooled least squares with Liang-Zeger cluster-robust covariance."""
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")

    if variant == "adjusted":
        design = np.hstack([dataset.x, dataset.a[:, None]])
        names = [f"beta:{c}" for c in dataset.x_names] + ["beta:treatment"]
        y = dataset.y
        cluster = dataset.subject_index
    else:
        keep = dataset.a == 0.0
        if not keep.any():
            raise AllRowsExcluded("every observation is treated; nothing left to fit")
        design = dataset.x[keep]
        names = [f"beta:{c}" for c in dataset.x_names]
        y = dataset.y[keep]
        cluster = dataset.subject_index[keep]

    if matrix_rank(design) < design.shape[1]:
        raise SingularDesign(f"{variant} GEE design matrix is rank deficient")

    gram, rhs = _exact_gram(design, y)
    coef = solve_sym(gram, rhs)
    resid = y - design @ coef

    # subject-level score totals X_i' r_i; clusters are contiguous blocks
    starts = np.concatenate(([0], np.flatnonzero(np.diff(cluster)) + 1))
    per_row = design * resid[:, None]
    cluster_scores = np.add.reduceat(per_row, starts, axis=0)

    p = design.shape[1]
    meat = np.empty((p, p))
    for j in range(p):
        for k in range(j, p):
            meat[j, k] = meat[k, j] = _fsum(cluster_scores[:, j] * cluster_scores[:, k])
    half = solve_sym(gram, meat)
    cov = solve_sym(gram, half.T)
    cov = 0.5 * (cov + cov.T)

    return GeeFit(
        coef=coef,
        cov_robust=cov,
        n_subjects=int(len(starts)),
        n_rows=int(y.shape[0]),
        variant=variant,
        param_names=names,
    )


def gee_fit_to_dict(fit):
    """Same JSON shape as the joint-model fit, for shared tooling."""
    return {
        "model": f"gee-{fit.variant}",
        "param_names": list(fit.param_names),
        "estimates": [float(v) for v in fit.coef],
        "se_robust": [float(v) for v in fit.se_robust()],
        "cov_robust": [float(v) for v in fit.cov_robust.ravel()],
        "cov_model": None,
        "dims": {"j_x": len(fit.param_names) - (1 if fit.variant == "adjusted" else 0),
                 "j_z": 0, "j_w": 0},
        "n_subjects": fit.n_subjects,
        "n_rows": fit.n_rows,
        "convergence": {"converged": True, "iterations": 0,
                        "gradient_inf_norm": 0.0, "negloglik": None,
                        "score_inf_norm": 0.0},
        "warnings": [],
    }
