import numpy as np
import pytest

from bameta.channels import PAM4, FrameDataset, EqChannelState, generate_frame, sample_demod_state, sample_eq_state
from bameta.config import DEMOD_DEFAULTS
from bameta.meta import (
    MetaTrainConfig,
    ModeMismatchError,
    bayes_meta_train,
    freq_meta_train,
    init_hyper,
    meta_test_eval,
    meta_train,
)
from bameta.metrics import mse
from bameta.models import RHO_MIN, BayesHyper, Demodulator, Equalizer, FreqHyper

EQ_SNR = 10 ** 0.6


class ToyQuadratic:
    """Task loss ``(phi - a)^2 / 2`` where ``a`` is the mean first output coordinate."""

    dim = 1

    def loss(self, theta, y, x):
        a = y[:, :, 0].mean(axis=1)[:, None]
        d = theta[..., 0] - a
        return d * d * 0.5

    def init_params(self, rng):
        return rng.normal(size=1)


def _toy_frames(optima, n=8):
    out = []
    for a in optima:
        y = np.full((n, 2), float(a))
        x = np.zeros(n, dtype=int)
        out.append(FrameDataset(PAM4, y[:4], x[:4], y[4:], x[4:], EqChannelState((0.0, 0.0)), 1.0))
    return out


def _eq_frames(rng, t, n_tr=4, n_te=4):
    return [generate_frame(sample_eq_state(rng), n_tr, n_te, EQ_SNR, rng) for _ in range(t)]


def test_zero_meta_iterations_return_init():
    rng = np.random.default_rng(0)
    frames = _eq_frames(rng, 3)
    for mode in ("freq", "bayes"):
        cfg = MetaTrainConfig(mode=mode, I_meta=0, B=None, eta=2e-3, R=5)
        xi0 = init_hyper(mode, Equalizer(), rng, cfg)
        hyper, trace = meta_train(frames, cfg, Equalizer(), xi0, rng)
        assert len(trace) == 0
        if mode == "freq":
            np.testing.assert_array_equal(hyper.init, xi0.init)
        else:
            np.testing.assert_array_equal(hyper.nu, xi0.nu)
            np.testing.assert_array_equal(hyper.rho, xi0.rho)
            assert hyper.nu.shape == hyper.rho.shape == (2,)


def test_quadratic_tasks_meta_learn_the_mean_optimum():
    optima = [-1.0, 0.5, 2.0, 3.5]
    cfg = MetaTrainConfig(mode="freq", B=None, I=1, eta=0.1, kappa=0.5, I_meta=200, n_tr=4)
    hyper, trace = freq_meta_train(_toy_frames(optima), cfg, ToyQuadratic(), FreqHyper(np.array([10.0])))
    assert abs(hyper.init[0] - np.mean(optima)) < 1e-2
    assert trace.losses[-1] < trace.losses[0]


def test_common_minimizer_is_found():
    cfg = MetaTrainConfig(mode="freq", B=2, I=2, eta=0.1, kappa=0.5, I_meta=300, n_tr=4)
    hyper, _ = freq_meta_train(_toy_frames([1.25] * 5), cfg, ToyQuadratic(), FreqHyper(np.array([-4.0])))
    assert abs(hyper.init[0] - 1.25) < 1e-3


def test_zero_meta_rate_keeps_xi_fixed():
    rng = np.random.default_rng(1)
    frames = _eq_frames(rng, 4)
    cfg = MetaTrainConfig(mode="bayes", B=None, eta=2e-3, kappa=0.0, R=5, I_meta=5, nu_init_std=None)
    xi0 = init_hyper("bayes", Equalizer(), rng, cfg)
    hyper, trace = bayes_meta_train(frames, cfg, Equalizer(), xi0, rng)
    np.testing.assert_array_equal(hyper.nu, xi0.nu)
    np.testing.assert_array_equal(hyper.rho, xi0.rho)
    assert len(set(trace.xi_hashes)) == 1


@pytest.mark.parametrize("mode", ["freq", "bayes"])
def test_meta_training_is_deterministic(mode):
    frames = _eq_frames(np.random.default_rng(2), 5)
    cfg = MetaTrainConfig(mode=mode, B=None, eta=2e-3, kappa=0.05, R=10, I_meta=10, meta_optimizer="adam", seed=3)
    a, ta = meta_train(frames, cfg, Equalizer())
    b, tb = meta_train(frames, cfg, Equalizer())
    assert ta.xi_hashes == tb.xi_hashes
    assert ta.losses == tb.losses


def test_mode_mismatch_is_rejected():
    rng = np.random.default_rng(4)
    frames = _eq_frames(rng, 1)
    cfg = MetaTrainConfig(mode="freq", eta=2e-3, n_tr=4, I_star=2, n_star_tr=4)
    with pytest.raises(ModeMismatchError):
        meta_test_eval(BayesHyper(np.zeros(2), np.zeros(2)), frames, cfg, Equalizer(), rng)


def test_unknown_optimizer_is_rejected():
    frames = _eq_frames(np.random.default_rng(5), 2)
    cfg = MetaTrainConfig(mode="freq", eta=2e-3, I_meta=1, meta_optimizer="rmsprop")
    with pytest.raises(ValueError):
        meta_train(frames, cfg, Equalizer())


def test_demod_defaults():
    p = DEMOD_DEFAULTS
    assert (p.n_star_tr, p.n_star_te, p.meta_test_frames) == (8, 4000, 50)
    assert (p.B, p.I_meta, p.I, p.I_star, p.eta, p.kappa) == (16, 200, 2, 200, 0.1, 1e-3)


def test_degenerate_bayes_matches_freq_predictions():
    rng = np.random.default_rng(6)
    model = Demodulator()
    frames = [generate_frame(sample_demod_state(rng), 8, 200, 10**1.8, rng) for _ in range(3)]
    nu = model.init_params(rng)
    # without the KL term a point-mass posterior follows plain GD exactly
    common = dict(eta=0.1, I=2, I_star=6, n_tr=4, n_star_tr=8, R_test=3, kl_coeff=0.0, seed=9)
    freq = meta_test_eval(FreqHyper(nu), frames, MetaTrainConfig(mode="freq", **common), model)
    bayes = meta_test_eval(
        BayesHyper(nu, np.full(model.dim, RHO_MIN)), frames, MetaTrainConfig(mode="bayes", **common), model
    )
    for a, b in zip(freq, bayes):
        np.testing.assert_array_equal(a.pred, b.pred)
        assert np.max(np.abs(a.confidence - b.confidence)) <= 1e-6


def test_equalizer_meta_training_beats_random_prior():
    model = Equalizer(150.0)
    wins = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        train = _eq_frames(rng, 20)
        test = _eq_frames(rng, 30, n_tr=4, n_te=200)
        cfg = MetaTrainConfig(
            mode="bayes", B=None, I=2, eta=2e-3, kappa=5e-2, R=20, R_test=20, kl_coeff=1.0, I_meta=100,
            I_star=2, n_tr=4, n_star_tr=4, meta_optimizer="adam", nu_init_std=None, seed=seed,
        )
        xi0 = init_hyper("bayes", model, rng, cfg)
        hyper, _ = bayes_meta_train(train, cfg, model, xi0, rng)

        def score(h):
            preds = meta_test_eval(h, test, cfg, model, np.random.default_rng(seed + 1000))
            return mse(np.concatenate([p.pred_mean for p in preds]), np.concatenate([p.truth for p in preds]))

        wins += score(hyper) < score(xi0)
    assert wins >= 18
