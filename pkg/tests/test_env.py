import numpy as np
import pytest

from cbm import env as E


def test_reset_is_deterministic_for_a_seed():
    env = E.make_copy_chain()
    assert np.array_equal(E.reset(env, 0), E.reset(env, 0))


def test_degenerate_range_is_pinned():
    env = E.make_copy_chain(n_core=4)
    env.ranges[3] = [0.0, 0.0]
    for seed in range(5):
        assert E.reset(env, seed)[3] == 0.0


def test_discrete_reset_stays_on_support():
    env = E.make_discrete_chain(n_core=3, n_values=2)
    for seed in range(20):
        s = E.reset(env, seed)
        assert np.all((s == env.lo) | (s == env.hi))


def test_zero_action_zeroes_controllable_distractors():
    env = E.make_noisy_linear(n_cd=4, n_ud=4)
    s = E.reset(env, 1)
    nxt, _ = E.step(env, s, np.zeros(env.d_A), 2)
    assert np.all(nxt[env.cd_slice] == 0.0)


def test_controllable_distractor_is_projection():
    env = E.make_noisy_linear(n_cd=4, n_ud=4)
    a = np.array([0.3, -0.8])
    nxt, _ = E.step(env, E.reset(env, 0), a, 0)
    assert np.allclose(nxt[env.cd_slice], a @ env.distractor_projection)


def test_uncontrollable_distractors_uniform():
    env = E.make_noisy_linear(n_cd=0, n_ud=2)
    rng = np.random.default_rng(0)
    s = E.reset(env, 0)
    vals = np.array([E.step(env, s, np.zeros(env.d_A), rng)[0][env.ud_slice] for _ in range(4000)])
    assert vals.min() >= -1 and vals.max() <= 1
    assert abs(vals.mean()) < 0.05
    assert abs(vals.var() - 1 / 3) < 0.03


def test_copy_chain_copies_exactly():
    env = E.make_copy_chain(n_core=4, noise_std=0.0)
    s = E.reset(env, 3)
    a = np.array([0.25])
    nxt, _ = E.step(env, s, a, 0)
    assert nxt[0] == 0.25
    assert np.array_equal(nxt[1:4], s[0:3])


def test_contact_gate_freezes_distant_block():
    env = E.make_contact_gated(n_blocks=1, n_cd=0, n_ud=0, contact_radius=0.1)
    for eef in np.linspace(-1, 1, 21):
        for block in np.linspace(-1, 1, 21):
            if abs(block - eef) <= 0.1 + 1e-9:
                continue
            for a in (-1.0, -0.3, 0.0, 0.6, 1.0):
                nxt, _ = E.step(env, np.array([eef, block]), np.array([a]), 0)
                assert nxt[1] == block


def test_out_of_range_action_rejected():
    env = E.make_copy_chain()
    with pytest.raises(E.RangeError):
        E.step(env, E.reset(env, 0), np.array([1.5]), 0)


def test_rewards_read_only_parents():
    spec = E.RewardSpec(0, [1, 3], "weighted-sum", [2.0, -1.0])
    env = E.make_noisy_linear(n_cd=0, n_ud=0, reward_specs=[spec])
    s = E.reset(env, 0)
    s2 = s.copy()
    s2[[0, 2, 4, 5]] = 0.123
    assert E.rewards(env, s, np.zeros(2)) == pytest.approx(E.rewards(env, s2, np.zeros(2)))
    assert E.rewards(env, s, np.zeros(2))[0] == pytest.approx(2 * s[1] - s[3])


def test_collect_dataset_lengths_and_resets():
    env = E.make_copy_chain(horizon=5)
    assert len(E.collect_dataset(env, n_transitions=1)) == 1
    buf = E.collect_dataset(env, n_transitions=12)
    assert np.flatnonzero(buf.arrays()["start"]).tolist() == [0, 5, 10]


def test_uniform_policy_marginal():
    env = E.make_copy_chain()
    a = E.collect_dataset(env, n_transitions=10_000, seed=4).arrays()["a"][:, 0]
    assert abs(a.mean()) < 0.05
    assert a.min() >= -1 and a.max() <= 1


def test_buffers_are_bit_identical_for_a_seed():
    env = E.make_noisy_linear()
    a = E.collect_dataset(env, n_transitions=300, seed=9).arrays()
    b = E.collect_dataset(env, n_transitions=300, seed=9).arrays()
    for k in a:
        assert np.array_equal(a[k], b[k])


@pytest.mark.parametrize("kind", ["copy-chain", "noisy-linear", "contact-gated"])
def test_faithfulness_by_paired_resampling(kind):
    env = E.build_env(kind, noise_std=0.0, n_cd=2, n_ud=0)
    rng = np.random.default_rng(0)
    dp = env.true_graph.dyn_parents
    for _ in range(30):
        s = E.reset(env, rng)
        a = rng.uniform(-1, 1, env.d_A)
        base, _ = E.step(env, s, a, 0)
        for j in range(env.d_S):
            s2 = s.copy()
            s2[j] = rng.uniform(env.lo[j], env.hi[j])
            nxt, _ = E.step(env, s2, a, 0)
            for i in range(env.d_S):
                if not dp[j, i]:
                    assert nxt[i] == base[i]


def test_distractors_never_feed_core_dynamics():
    for env in (E.make_noisy_linear(), E.make_contact_gated(), E.make_copy_chain(n_cd=3, n_ud=3)):
        dp = env.true_graph.dyn_parents
        assert not dp[env.n_core : env.d_S, : env.n_core].any()


def test_ring_buffer_evicts_oldest():
    buf = E.ReplayBuffer(3, 1, 1)
    for k in range(5):
        buf.add([k], [0], [0], [k + 1])
    assert buf.arrays()["s"][:, 0].tolist() == [2, 3, 4]


def test_buffer_sampling_reproducible():
    env = E.make_copy_chain()
    buf = E.collect_dataset(env, n_transitions=100)
    a = buf.sample(10, np.random.default_rng(1))
    b = buf.sample(10, np.random.default_rng(1))
    assert np.array_equal(a["s"], b["s"])


def test_buffer_binary_round_trip(tmp_path):
    env = E.make_noisy_linear()
    buf = E.collect_dataset(env, n_transitions=50)
    buf.save(tmp_path / "b.bin")
    raw = (tmp_path / "b.bin").read_bytes()
    assert raw[:8] == b"CBMDATA1"
    back = E.ReplayBuffer.load(tmp_path / "b.bin")
    x, y = buf.arrays(), back.arrays()
    assert np.allclose(x["s"], y["s"], atol=1e-6)
    assert np.array_equal(x["start"], y["start"])


def test_env_json_round_trip(tmp_path):
    env = E.make_contact_gated()
    env.save(tmp_path / "e.json")
    back = E.EnvSpec.load(tmp_path / "e.json")
    assert back.to_dict() == env.to_dict()


def test_env_validation_rejects_bad_graph():
    env = E.make_noisy_linear(n_cd=1, n_ud=1)
    d = env.to_dict()
    d["true_graph"]["dyn_parents"][env.n_core][0] = 1  # cd feeds core
    with pytest.raises(ValueError):
        E.EnvSpec.from_dict(d)
