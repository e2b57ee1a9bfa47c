import json
import math

import numpy as np
import pytest

from bameta.config import DEMOD_DEFAULTS, EQ_DEFAULTS, EXPERIMENTS, ExperimentConfig, make_config, stream, with_overrides


def test_paper_profile_matches_task_tables():
    d = make_config("demod_ser_vs_t", "paper")
    assert (d.snr_db, d.eta, d.kappa, d.n_tr, d.n_te) == (18.0, 0.1, 1e-3, 4, 3000)
    assert (d.n_star_tr, d.n_star_te, d.meta_test_frames) == (8, 4000, 50)
    assert (d.I, d.I_star, d.I_meta, d.R, d.B, d.kl_coeff) == (2, 200, 200, 100, 16, 0.1)
    e = make_config("eq_active_vs_passive", "paper")
    assert (e.snr_db, e.eta, e.kappa, e.beta, e.t_init) == (6.0, 2e-3, 5e-2, 150.0, 3)
    assert (e.n_tr, e.n_te, e.n_star_tr, e.I, e.I_star, e.R, e.kl_coeff) == (4, 4, 4, 2, 2, 100, 1.0)
    assert e.I_meta is None and e.B is None and e.meta_iterations == 100
    assert e.meta_optimizer == "sgd"


def test_desk_profile_shortcuts():
    d = make_config("demod_ser_vs_t", "desk")
    assert (d.n_star_te, d.meta_test_frames, d.t_grid, d.seeds) == (1000, 10, [16], 5)
    assert (d.snr_db, d.n_tr, d.n_star_tr, d.I, d.I_star, d.R, d.B) == (18.0, 4, 8, 2, 200, 100, 16)
    e = make_config("eq_active_vs_passive", "desk")
    assert (e.budget, e.seeds, e.t_init, e.meta_test_frames) == (10, 20, 3, 100)


def test_snr_conversion():
    assert make_config("demod_ser_vs_t").snr == pytest.approx(10**1.8)
    assert make_config("eq_scoring_map").snr == pytest.approx(10**0.6)


def test_overrides_are_recorded():
    cfg = make_config("demod_ser_vs_t", "desk", 3, {"eta": 0.5})
    assert cfg.eta == 0.5 and cfg.overrides == {"eta": 0.5} and cfg.master_seed == 3
    assert json.loads(cfg.to_json())["overrides"] == {"eta": 0.5}
    cfg2 = with_overrides(cfg, kappa=0.2)
    assert cfg2.overrides == {"eta": 0.5, "kappa": 0.2} and cfg2.kappa == 0.2


def test_round_trip_and_unknown_keys():
    for name in EXPERIMENTS:
        cfg = make_config(name)
        assert ExperimentConfig.from_dict(json.loads(cfg.to_json())) == cfg
    with pytest.raises(ValueError):
        make_config("demod_ser_vs_t", overrides={"learning_rate": 1})
    with pytest.raises(ValueError):
        make_config("fig10")
    with pytest.raises(ValueError):
        make_config("demod_ser_vs_t", "laptop")


def test_defaults_objects_are_frozen():
    with pytest.raises(Exception):
        DEMOD_DEFAULTS.eta = 1.0
    assert EQ_DEFAULTS.beta == 150.0 and math.isclose(10 ** (EQ_DEFAULTS.snr_db / 10), 10**0.6)


def test_streams_are_independent_and_reproducible():
    a = stream(5, "meta-train", 0).random(4)
    np.testing.assert_array_equal(a, stream(5, "meta-train", 0).random(4))
    assert not np.array_equal(a, stream(5, "meta-train", 1).random(4))
    assert not np.array_equal(a, stream(5, "meta-test", 0).random(4))
    assert not np.array_equal(a, stream(6, "meta-train", 0).random(4))
