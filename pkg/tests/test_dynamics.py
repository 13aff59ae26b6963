import math

import numpy as np
import pytest
import torch

from cbm import dynamics as D
from cbm import env as E
from cbm.nets import ScoreNet, drop_mask, full_mask


def _small_cfg(**kw):
    base = dict(trunk_widths=(16, 16), label_widths=(16,), feature_dim=16, n_negatives=32, batch_size=16)
    base.update(kw)
    return D.DynConfig(**base)


def _copy_setup(n=2000, seed=0, n_core=3, **kw):
    env = E.make_copy_chain(n_core=n_core, noise_std=0.0)
    buf = E.collect_dataset(env, n_transitions=n, seed=seed)
    model = D.build_model(buf, _small_cfg(**kw), seed, env.ranges)
    return env, buf, model


def _params(model):
    return [p.detach().clone() for p in model.net.parameters()]


def test_info_nce_equal_scores_is_log_n_plus_one():
    net = ScoreNet(1, 1, [0], (4,), (4,), 3, dtype=torch.float64)
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    loss = D.info_nce_loss(net, 0.3, np.zeros(2), full_mask(1), [0.1, -0.2, 0.5])
    assert loss == pytest.approx(math.log(4), abs=1e-12)


def test_info_nce_hand_value():
    # score(y) = y with a linear label tower and constant context feature 1
    net = ScoreNet(1, 1, [0], (), (), 1, dtype=torch.float64)
    with torch.no_grad():
        net.trunk.weights[0].zero_()
        net.trunk.biases[0].fill_(1.0)
        net.label_tower.weights[0].fill_(1.0)
        net.label_tower.biases[0].zero_()
    loss = D.info_nce_loss(net, 1.0, np.zeros(2), full_mask(1), [0.0, 0.0])
    assert loss == pytest.approx(-math.log(math.e / (math.e + 2)), abs=1e-9)
    assert loss == pytest.approx(0.551445, abs=1e-6)
    far = D.info_nce_loss(net, 60.0, np.zeros(2), full_mask(1), [0.0, 0.0])
    assert 0.0 <= far < 1e-20


def test_info_nce_rejects_empty_negatives():
    net = ScoreNet(1, 1, [0], (), (), 1)
    with pytest.raises(ValueError):
        D.info_nce_loss(net, 0.0, np.zeros(2), full_mask(1), [])


def test_zero_steps_leaves_model_unchanged():
    _, buf, model = _copy_setup(200)
    before = _params(model)
    _, trace = D.train_dyn(model, buf, 0)
    assert trace == []
    for p, q in zip(model.net.parameters(), before):
        assert torch.equal(p, q)


def test_empty_buffer_rejected():
    _, buf, model = _copy_setup(50)
    with pytest.raises(ValueError):
        D.train_dyn(model, E.ReplayBuffer(4, buf.d_S, buf.d_A), 1)


def test_training_lowers_full_mask_loss_and_stays_finite():
    _, buf, model = _copy_setup(2000)
    start = D.mean_info_nce(model, buf, 256).mean()
    _, trace = D.train_dyn(model, buf, 600)
    end = D.mean_info_nce(model, buf, 256).mean()
    assert end < start - 0.3
    assert np.all(np.isfinite(np.array([row[2:] for row in trace])))
    assert start <= math.log(33) + 0.5


def test_loss_trace_rows_match_steps(tmp_path):
    _, buf, model = _copy_setup(300)
    _, trace = D.train_dyn(model, buf, 7)
    assert len(trace) == 7 * model.d_S
    D.write_loss_trace(trace, tmp_path / "loss.csv", model.d_S)
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert len(lines) == 1 + 7
    assert lines[0].split(",")[:3] == ["step", "loss_full_s1", "loss_masked_s1"]


def test_masked_scores_ignore_masked_variable():
    _, buf, model = _copy_setup(300)
    D.train_dyn(model, buf, 20)
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, model.d_S + model.d_A)
    x2 = x.copy()
    x2[1] = -x[1] + 0.3
    m = drop_mask(model.d_S, 1)
    for i in range(model.d_S):
        from cbm.nets import score

        assert score(model.net, 0.2, x, m, i) == score(model.net, 0.2, x2, m, i)


def test_regularization_off_and_on_both_run():
    _, buf, model = _copy_setup(300, lam1=0.0, lam2=0.0)
    D.train_dyn(model, buf, 5)
    _, buf, model = _copy_setup(300, lam1=1e-3, lam2=1e-3)
    _, trace = D.train_dyn(model, buf, 5)
    assert all(row[5] > 0 for row in trace)


def test_save_load_round_trip(tmp_path):
    _, buf, model = _copy_setup(300)
    D.train_dyn(model, buf, 10)
    path = D.save_model(model, tmp_path)
    back = D.load_model(path)
    assert back.steps_done == 10
    s = buf.arrays()["s"][:5]
    a = buf.arrays()["a"][:5]
    assert np.allclose(D.predict_next(model, s, a, 64), D.predict_next(back, s, a, 64), atol=1e-5)


def test_resume_matches_uninterrupted_training(tmp_path):
    _, buf, ref = _copy_setup(400, seed=3)
    D.train_dyn(ref, buf, 30)
    _, buf, part = _copy_setup(400, seed=3)
    D.train_dyn(part, buf, 15)
    path = D.save_model(part, tmp_path)
    D.save_resume_state(part, tmp_path / "resume.pt")
    back = D.load_model(path)
    D.load_resume_state(back, tmp_path / "resume.pt")
    D.train_dyn(back, buf, 15)
    for p, q in zip(ref.net.parameters(), back.net.parameters()):
        assert torch.allclose(p, q, atol=1e-5)


def test_sampled_argmax_constant_score_takes_first_sample():
    rng_a, rng_b = np.random.default_rng(5), np.random.default_rng(5)
    val, k = D.sampled_argmax(lambda y: np.zeros_like(y), -1, 1, 100, rng_a)
    assert k == 0
    assert val == rng_b.uniform(-1, 1, 100)[0]


def test_sampled_argmax_quadratic_peak():
    val, _ = D.sampled_argmax(lambda y: -((y - 0.5) ** 2), -1, 1, 8192, np.random.default_rng(0))
    assert abs(val - 0.5) < 3e-4


def test_sampled_argmax_needs_samples():
    with pytest.raises(ValueError):
        D.sampled_argmax(lambda y: y, 0, 1, 0, 0)


def test_rollout_one_step_equals_predict_next():
    _, buf, model = _copy_setup(300)
    D.train_dyn(model, buf, 10)
    s0 = buf.arrays()["s"][0]
    a = np.array([[0.3]])
    one = D.rollout(model, s0, a, 128, np.random.default_rng(2))
    direct = D.predict_next(model, s0, a[0], 128, np.random.default_rng(2))
    assert np.allclose(one[0], np.clip(direct, model.norm.ctx_lo[:3], model.norm.ctx_hi[:3]))
    with pytest.raises(ValueError):
        D.rollout(model, s0, np.zeros((0, 1)))


@pytest.fixture(scope="module")
def trained_copy_chain():
    """Zero-noise copy chain, 20k steps at desk widths with N=512."""
    env = E.make_copy_chain(n_core=4, noise_std=0.0)
    buf = E.collect_dataset(env, n_transitions=20_000, seed=0)
    cfg = D.DynConfig(trunk_widths=(32, 32), label_widths=(32,), feature_dim=32)
    model = D.build_model(buf, cfg, 0, env.ranges)
    D.train_dyn(model, buf, 20_000)
    return env, buf, model


@pytest.mark.slow
def test_trained_copy_chain_beats_no_change_baseline(trained_copy_chain):
    env, _, model = trained_copy_chain
    ev = E.collect_dataset(env, n_transitions=300, seed=99).arrays()
    pred = D.predict_next(model, ev["s"], ev["a"], 1024)
    assert np.abs(pred - ev["s_next"]).mean() < np.abs(ev["s"] - ev["s_next"]).mean()


@pytest.mark.slow
def test_trained_copy_chain_full_mask_loss_below_half_uniform(trained_copy_chain):
    _, buf, model = trained_copy_chain
    assert D.mean_info_nce(model, buf, 512).mean() < 0.5 * D.uniform_nce_baseline(512)


@pytest.mark.slow
def test_rollout_error_grows_with_horizon(trained_copy_chain):
    env, _, model = trained_copy_chain
    rng = np.random.default_rng(11)
    errs = np.zeros(5)
    for k in range(100):
        s = E.reset(env, rng)
        acts = rng.uniform(-1, 1, (5, 1))
        true = []
        cur = s
        for a in acts:
            cur, _ = E.step(env, cur, a, rng)
            true.append(cur)
        pred = D.rollout(model, s, acts, 1024, rng)
        errs += np.abs(pred - np.array(true)).mean(1) / 100
    # errors saturate once they have shifted down the whole chain, so the trend is checked, not each step
    assert errs[-1] >= errs[0]
    assert np.polyfit(np.arange(5), errs, 1)[0] >= 0


def test_identity_dynamics_perfect_model_rollout_is_constant(monkeypatch):
    env = E.make_copy_chain(n_core=2, noise_std=0.0)
    buf = E.collect_dataset(env, n_transitions=50)
    model = D.build_model(buf, _small_cfg(), 0, env.ranges)
    monkeypatch.setattr(D, "predict_next", lambda m, s, a, n=None, rng=None: np.array(s, dtype=float))
    traj = D.rollout(model, np.array([0.25, -0.5]), np.zeros((5, 1)))
    assert np.array_equal(traj, np.tile([0.25, -0.5], (5, 1)))


def test_config_validation():
    with pytest.raises(ValueError):
        D.DynConfig(n_negatives=0)
    with pytest.raises(ValueError):
        D.DynConfig.from_dict({"bogus": 1})
    assert D.DynConfig.from_dict(D.DynConfig().to_dict()) == D.DynConfig()
