import numpy as np
import pytest

from lem.data import LongDataset
from lem.errors import NotPositiveDefinite
from lem.simulate import (
    SimConfig,
    apply_missingness,
    covariate_correlation,
    error_covariance,
    gen_covariates,
    gen_outcomes,
    preset,
    run_study,
    substream,
)


@pytest.fixture(scope="module")
def big_draw():
    cfg = SimConfig(n_subjects=100_000, seed=99)
    rng = substream(cfg.seed, 0)
    covs = gen_covariates(cfg, rng)
    dataset, latents = gen_outcomes(covs, cfg, rng, return_latents=True)
    return cfg, covs, dataset, latents


def test_covariate_correlation_matrix_values():
    r = covariate_correlation(SimConfig())
    assert r.shape == (21, 21)
    assert r[0, 0] == 1.0
    assert r[0, 1] == 0.20          # same time, different variable
    assert r[0, 7] == 0.30          # same variable, adjacent time
    assert r[0, 8] == 0.10          # different variable, different time


def test_covariate_sample_correlations(big_draw):
    _, covs, _, _ = big_draw
    flat = covs.reshape(covs.shape[0], -1)
    cor = np.corrcoef(flat, rowvar=False)
    assert cor[0, 1] == pytest.approx(0.20, abs=0.01)     # (O_t1_v1, O_t1_v2)
    assert cor[0, 7] == pytest.approx(0.30, abs=0.01)     # (O_t1_v1, O_t2_v1)
    assert cor[0, 8] == pytest.approx(0.10, abs=0.01)     # (O_t1_v1, O_t2_v2)
    np.testing.assert_allclose(flat.mean(axis=0), 0.0, atol=0.02)
    np.testing.assert_allclose(flat.std(axis=0), 1.0, atol=0.02)


def test_outcome_error_scale(big_draw):
    _, _, dataset, latents = big_draw
    resid = dataset.y - dataset.x @ np.array(SimConfig().beta) \
        - (dataset.w @ np.array(SimConfig().eta)) * dataset.a
    np.testing.assert_allclose(resid, latents.epsilon.reshape(-1), atol=1e-10)
    assert resid.std() == pytest.approx(1.0, abs=0.02)


def test_latent_concurrent_correlation(big_draw):
    _, _, _, latents = big_draw
    for t in range(3):
        c = np.corrcoef(latents.gamma[:, t], latents.epsilon[:, t])[0, 1]
        assert c == pytest.approx(0.50, abs=0.02)


def test_latent_longitudinal_correlations(big_draw):
    _, _, _, latents = big_draw
    assert np.corrcoef(latents.epsilon[:, 0], latents.epsilon[:, 1])[0, 1] == pytest.approx(0.60, abs=0.02)
    assert np.corrcoef(latents.gamma[:, 0], latents.gamma[:, 1])[0, 1] == pytest.approx(0.50, abs=0.02)
    assert np.corrcoef(latents.gamma[:, 0], latents.epsilon[:, 1])[0, 1] == pytest.approx(0.20, abs=0.02)


def test_treatment_marginal_probability_at_alpha_zero():
    cfg = SimConfig(n_subjects=100_000, n_times=1, alpha=(0.0,) * 5, seed=5)
    rng = substream(cfg.seed, 0)
    d = gen_outcomes(gen_covariates(cfg, rng), cfg, rng)
    assert d.a.mean() == pytest.approx(0.5, abs=0.01)


def test_generated_dataset_passes_validation():
    from lem.data import validate

    cfg = SimConfig(n_subjects=400, seed=12)
    rng = substream(cfg.seed, 0)
    d = gen_outcomes(gen_covariates(cfg, rng), cfg, rng)
    rep = validate(d)
    assert rep.full_rank_x and rep.full_rank_z and rep.full_rank_w
    assert rep.n_rows_untreated >= 1 and rep.n_rows_treated >= 1
    assert rep.cluster_size_counts == {3: 400}


def test_saturated_probit_all_treated():
    cfg = SimConfig(n_subjects=2000, alpha=(10.0, 0.0, 0.0, 0.0, 0.0), seed=6)
    rng = substream(cfg.seed, 0)
    d = gen_outcomes(gen_covariates(cfg, rng), cfg, rng)
    assert (d.a == 1.0).all()


def test_invalid_correlation_structure_rejected():
    with pytest.raises(NotPositiveDefinite):
        SimConfig(rho_y=-0.9)


def test_error_covariance_blocks():
    s = error_covariance(SimConfig())
    assert s.shape == (6, 6)
    assert s[0, 0] == 1.0 and s[0, 1] == 0.60           # outcome block
    assert s[3, 3] == 1.0 and s[3, 4] == 0.50           # treatment block
    assert s[0, 3] == 0.50 and s[0, 4] == 0.20          # cross block


# ---------------------------------------------------------------------------
# missingness regimes
# ---------------------------------------------------------------------------

def test_mcar_rates_and_baseline_protection():
    cfg = SimConfig(n_subjects=60_000, missingness="mcar", seed=7)
    rng = substream(cfg.seed, 0)
    d = gen_outcomes(gen_covariates(cfg, rng), cfg, rng)
    kept = apply_missingness(d, cfg, rng)
    counts = np.bincount(kept.time_index, minlength=3)
    assert counts[0] == cfg.n_subjects                      # baseline never deleted
    assert counts[1] / cfg.n_subjects == pytest.approx(2 / 3, abs=0.01)
    assert counts[2] / cfg.n_subjects == pytest.approx(1 / 2, abs=0.01)


def zeros_dataset(n, y_value):
    cfg = SimConfig()
    ones = np.ones((n, 1))
    zeros = np.zeros((n, 4))
    block = np.hstack([ones, zeros])
    return LongDataset.from_arrays(
        y=np.full(n, y_value), a=np.zeros(n), x=block, z=block, w=block,
    ), cfg


def test_covariate_mechanism_closed_form_at_zero():
    # all covariates zero: deletion probability expit(-1) = 0.2689
    d, cfg = zeros_dataset(100_000, y_value=0.0)
    d = LongDataset(
        subject_ids=d.subject_ids, time_index=d.time_index, y=d.y, a=d.a,
        x=d.x, z=d.z, w=d.w, subject_index=d.subject_index,
        x_names=d.x_names, z_names=d.z_names, w_names=d.w_names,
        column_names=tuple(f"O{i}" for i in range(1, 8)),
        column_values=np.zeros((d.n_rows, 7)),
    )
    cfg = SimConfig(missingness="covariate")
    kept = apply_missingness(d, cfg, substream(1, 0))
    assert 1 - kept.n_rows / d.n_rows == pytest.approx(0.2689, abs=0.005)


def test_covariate_mechanism_overall_rate_near_30_percent():
    cfg = SimConfig(n_subjects=35_000, missingness="covariate", seed=8)
    rng = substream(cfg.seed, 0)
    d = gen_outcomes(gen_covariates(cfg, rng), cfg, rng)
    kept = apply_missingness(d, cfg, rng)
    assert 1 - kept.n_rows / d.n_rows == pytest.approx(0.30, abs=0.01)


def test_outcome_mechanism_bin_probabilities():
    for y_value, p in [(-5.0, 0.1), (0.5, 0.4), (4.0, 0.7)]:
        d, _ = zeros_dataset(60_000, y_value)
        cfg = SimConfig(missingness="outcome")
        kept = apply_missingness(d, cfg, substream(2, 0))
        assert 1 - kept.n_rows / d.n_rows == pytest.approx(p, abs=0.006)


def test_missingness_drops_empty_subjects():
    cfg = SimConfig(n_subjects=3000, missingness="outcome", seed=9)
    rng = substream(cfg.seed, 0)
    d = gen_outcomes(gen_covariates(cfg, rng), cfg, rng)
    kept = apply_missingness(d, cfg, rng)
    assert kept.n_subjects < cfg.n_subjects
    assert kept.cluster_sizes().min() >= 1


# ---------------------------------------------------------------------------
# replicate studies
# ---------------------------------------------------------------------------

def small_cfg(**kw):
    defaults = dict(n_subjects=120, seed=17)
    defaults.update(kw)
    return SimConfig(**defaults)


def test_study_determinism_same_seed():
    a = run_study(small_cfg(), 6)
    b = run_study(small_cfg(), 6)
    assert a.to_csv() == b.to_csv()
    assert a.to_table() == b.to_table()


def test_study_parallel_matches_serial():
    serial = run_study(small_cfg(), 6, threads=1)
    parallel = run_study(small_cfg(), 6, threads=2)
    assert serial.to_csv() == parallel.to_csv()


def test_study_single_replicate_has_no_ese():
    s = run_study(small_cfg(), 1)
    assert s.methods["lem"].empirical_se is None
    assert "-" in s.to_table()
    # csv leaves the ese field empty rather than zero
    line = s.to_csv().splitlines()[1]
    assert line.split(",")[4] == ""


def test_study_lem_gee_agree_without_endogeneity():
    cfg = small_cfg(n_subjects=150, rho=0.0, eta=(0.0,) * 5, seed=18)
    s = run_study(cfg, 12)
    lem, gee = s.methods["lem"], s.methods["gee"]
    mc_se = np.maximum(lem.empirical_se, gee.empirical_se) / np.sqrt(s.n_replicates)
    diff = np.abs(lem.mean_estimate - gee.mean_estimate)
    assert (diff <= 4.0 * mc_se).all()


def test_study_counts_and_layout():
    s = run_study(small_cfg(seed=19), 3)
    assert s.n_replicates == 3
    assert s.failures == {"lem": 0, "gee": 0}
    table = s.to_table()
    assert "LEM" in table and "GEE" in table
    assert "beta_0" in table
    csv = s.to_csv()
    assert csv.splitlines()[0].startswith("method,coefficient,truth")
    assert len(csv.splitlines()) == 1 + 2 * 5


def test_presets():
    assert preset("sim1").missingness == "none"
    assert preset("sim2").missingness == "mcar"
    assert preset("sim3").missingness == "covariate"
    assert preset("sim4", seed=3).missingness == "outcome"
    with pytest.raises(ValueError):
        preset("sim9")


def test_config_dict_roundtrip():
    cfg = preset("sim3", seed=11)
    again = SimConfig.from_dict(cfg.to_dict())
    assert again == cfg
    with pytest.raises(ValueError):
        SimConfig.from_dict({"bogus_key": 1})


def test_reps_must_be_positive():
    with pytest.raises(ValueError):
        run_study(small_cfg(), 0)
