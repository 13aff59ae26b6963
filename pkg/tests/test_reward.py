import math

import numpy as np
import pytest
import torch

from cbm import env as E
from cbm import reward as R


def _setup(spec, n=2000, seed=0, hidden=(32, 32)):
    env = E.make_noisy_linear(n_cd=0, n_ud=0, reward_specs=[spec])
    buf = E.collect_dataset(env, n_transitions=n, seed=seed)
    return env, buf, R.build_reward_net(buf, R.RewardConfig(hidden=hidden), seed, env.ranges)


def _linear(parents, weights, noise=0.1):
    return E.RewardSpec(0, parents, "weighted-sum", weights, noise)


def test_zero_steps_unchanged():
    _, buf, net = _setup(_linear([2], [1.0]), 100)
    before = [p.detach().clone() for p in net.net.parameters()]
    R.train_reward(net, buf, 0)
    for p, q in zip(net.net.parameters(), before):
        assert torch.equal(p, q)


def test_parents_from_cmi_examples():
    assert R.parents_from_cmi([0.0, 0.0, 0.0]) == []
    assert R.parents_from_cmi([0.5, 0.0, 0.03], 0.02) == [0, 2]
    assert R.parents_from_cmi([0.02], 0.02) == [0]
    with pytest.raises(ValueError):
        R.parents_from_cmi([0.1], 0.0)


def test_action_is_never_a_reward_parent_candidate():
    _, buf, net = _setup(_linear([2], [1.0]), 100)
    with pytest.raises(ValueError):
        R.reward_cmi(net, net.d_S, buf.take(np.arange(10)))
    assert R.reward_cmi_matrix(net, buf.take(np.arange(10))).shape == (1, net.d_S)


def test_constant_ratio_gives_ln2():
    _, buf, net = _setup(_linear([2], [1.0]), 100)

    def fake_params(x, mask=None):
        B = x.shape[0]
        ls = torch.zeros(1, B) if mask is None else torch.full((1, B), math.log(2))
        return torch.zeros(1, B), ls

    net.params = fake_params
    net.target_tensor = lambda r: torch.zeros(1, len(r))
    assert R.reward_cmi(net, 0, buf.take(np.arange(30))) == pytest.approx(math.log(2), abs=1e-6)


def test_masked_invariance():
    _, buf, net = _setup(_linear([2], [1.0]), 100)
    d = buf.take(np.arange(8))
    s2 = d["s"].copy()
    s2[:, 4] = 0.77
    units = np.ones(net.d_S + 1, bool)
    units[4] = False
    assert np.array_equal(net.predict(d["s"], d["a"], units), net.predict(s2, d["a"], units))


def test_zero_reward_fits_mean_zero():
    spec = E.RewardSpec(0, [0], "weighted-sum", [0.0], 0.0)
    _, buf, net = _setup(spec, 300)
    R.train_reward(net, buf, 200)
    d = buf.take(np.arange(50))
    assert np.abs(net.predict(d["s"], d["a"])).max() < 0.1


def test_reward_fit_correlates_with_parent():
    _, buf, net = _setup(_linear([3], [1.0], 0.05), 3000)
    _, trace = R.train_reward(net, buf, 3000)
    assert np.all(np.isfinite(np.array(trace)))
    d = buf.take(np.arange(500))
    pred = net.predict(d["s"], d["a"])[:, 0]
    assert np.corrcoef(pred, d["s"][:, 3])[0, 1] > 0.95


@pytest.mark.slow
def test_parent_ranking_and_nonparents_below_threshold():
    _, buf, net = _setup(_linear([1], [1.0], 0.05), 4000)
    R.train_reward(net, buf, 6000)
    ev = buf.take(np.arange(len(buf) - 1000, len(buf)))
    cmi = R.reward_cmi_matrix(net, ev)[0]
    assert int(np.argmax(cmi)) == 1
    assert R.reward_parents(net, ev) == [1]


def test_save_load_round_trip(tmp_path):
    _, buf, net = _setup(_linear([2], [1.0]), 200)
    R.train_reward(net, buf, 10)
    back = R.load_reward_net(R.save_reward_net(net, tmp_path))
    d = buf.take(np.arange(6))
    assert np.allclose(net.predict(d["s"], d["a"]), back.predict(d["s"], d["a"]), atol=1e-6)


def test_cmi_csv_and_parents_json(tmp_path):
    R.write_reward_cmi_csv(np.array([[0.5, 0.0, 0.03]]), tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert len(lines) == 2
    R.save_parents({0: [0, 2]}, tmp_path / "p.json")
    assert "parents" in (tmp_path / "p.json").read_text()


def test_empty_buffer_rejected():
    _, buf, net = _setup(_linear([2], [1.0]), 50)
    with pytest.raises(ValueError):
        R.train_reward(net, E.ReplayBuffer(3, buf.d_S, buf.d_A), 1)
