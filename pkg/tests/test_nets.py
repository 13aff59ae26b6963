import math

import numpy as np
import pytest
import torch

from cbm import nets as N
from cbm.oracle import finite_diff_grad


def _net(seed=0, d_S=3, d_A=1, trunk=(8, 8), label=(6,), F=5, dtype=torch.float64):
    return N.ScoreNet(d_S, d_A, [0], trunk, label, F, generator=torch.Generator().manual_seed(seed), dtype=dtype)


def test_mask_invariance_is_bit_exact():
    net = _net()
    x = np.array([0.1, -0.4, 0.7, 0.2])
    m = N.drop_mask(3, 1)
    x2 = x.copy()
    x2[1] = 123.0
    assert N.score(net, 0.3, x, m) == N.score(net, 0.3, x2, m)


def test_action_mask_covers_all_action_dims():
    net = _net(d_A=2)
    x = np.array([0.1, -0.4, 0.7, 0.2, 0.9])
    x2 = x.copy()
    x2[3:] = [-0.5, 0.5]
    m = N.drop_mask(3, 3)
    assert N.score(net, 0.0, x, m) == N.score(net, 0.0, x2, m)


def test_zero_weights_score_zero():
    net = _net()
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    assert N.score(net, 0.7, np.ones(4), N.full_mask(3)) == 0.0


def test_linear_towers_hand_computed():
    net = N.ScoreNet(2, 1, [0], (), (), 2, dtype=torch.float64)
    with torch.no_grad():
        net.trunk.weights[0].copy_(torch.tensor([[[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]]]))
        net.trunk.biases[0].copy_(torch.tensor([[[0.5, -0.5]]]))
        net.label_tower.weights[0].copy_(torch.tensor([[[3.0, -1.0]]]))
        net.label_tower.biases[0].copy_(torch.tensor([[[0.0, 1.0]]]))
    x = np.array([1.0, 2.0, -1.0])
    y = 0.5
    ctx = np.array([1 * 1 + 0 + (-1) * 1 + 0.5, 0 + 2 * 2 + (-1) * 1 - 0.5])
    lab = np.array([3 * y, -y + 1.0])
    assert N.score(net, y, x, N.full_mask(2)) == pytest.approx(float(ctx @ lab), abs=1e-12)
    assert N.score_input_grad(net, y, x, N.full_mask(2)) == pytest.approx(float(ctx @ np.array([3.0, -1.0])))


def test_identity_label_tower_gradient_is_trunk_feature():
    net = N.ScoreNet(2, 1, [0], (4,), (), 1, dtype=torch.float64, generator=torch.Generator().manual_seed(3))
    with torch.no_grad():
        net.label_tower.weights[0].fill_(1.0)
        net.label_tower.biases[0].zero_()
    x = np.array([0.2, -0.3, 0.4])
    c = N.score(net, 1.0, x, N.full_mask(2))  # score(1) = c * 1
    assert N.score_input_grad(net, 0.37, x, N.full_mask(2)) == pytest.approx(c)


def test_kink_uses_right_derivative():
    net = N.ScoreNet(1, 1, [0], (), (1,), 1, dtype=torch.float64)
    with torch.no_grad():
        net.trunk.weights[0].zero_()
        net.trunk.biases[0].fill_(1.0)
        net.label_tower.weights[0].copy_(torch.tensor([[[1.0]]]))
        net.label_tower.biases[0].zero_()
        net.label_tower.weights[1].fill_(1.0)
        net.label_tower.biases[1].zero_()
    # score(y) = relu(y); at y = 0 the right derivative is 1
    assert N.score_input_grad(net, 0.0, np.zeros(2), N.full_mask(1)) == 1.0
    assert N.score_input_grad(net, -1e-3, np.zeros(2), N.full_mask(1)) == 0.0


def test_nan_input_rejected():
    net = _net()
    with pytest.raises(ValueError):
        N.score(net, float("nan"), np.zeros(4), N.full_mask(3))
    with pytest.raises(ValueError):
        N.score(net, 0.0, np.array([0, np.nan, 0, 0]), N.full_mask(3))


def test_empty_mask_rejected():
    with pytest.raises(ValueError):
        N.unit_mask_to_dims(np.zeros(4, dtype=bool), 3, 1)


@pytest.mark.parametrize("seed", range(5))
def test_input_gradient_matches_finite_differences(seed):
    net = _net(seed)
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, 4)
    y = float(rng.uniform(-1, 1))
    m = N.full_mask(3)
    fd = finite_diff_grad(lambda v: N.score(net, float(v[0]), x, m), [y], 1e-4)[0]
    an = N.score_input_grad(net, y, x, m)
    assert abs(an - fd) <= 1e-4 * max(1.0, abs(fd))


def _batch(rng, B=4, K=3, d_S=2, d_A=1):
    return {
        "x": rng.uniform(-1, 1, (B, d_S + d_A)),
        "mask": np.ones((B, d_S + 1), dtype=bool),
        "y": rng.uniform(-1, 1, B),
        "negatives": rng.uniform(-1, 1, (B, K)),
    }


def _flat_loss(net, batch, lam1, lam2):
    params = list(net.parameters())
    shapes = [p.shape for p in params]
    sizes = [p.numel() for p in params]

    def f(theta):
        with torch.no_grad():
            off = 0
            for p, n, sh in zip(params, sizes, shapes):
                p.copy_(torch.as_tensor(theta[off : off + n]).reshape(sh))
                off += n
            return float(N.penalized_loss(net, batch, lam1, lam2))

    theta0 = torch.cat([p.detach().reshape(-1) for p in params]).numpy().copy()
    return f, theta0


def test_tiny_net_full_gradient_matches_finite_differences():
    net = N.ScoreNet(2, 1, [0], (3,), (3,), 1, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    rng = np.random.default_rng(1)
    batch = _batch(rng)
    g = N.grad_of_loss_with_penalty(net, batch, 0.1, 0.2)
    an = torch.cat([g[n].reshape(-1) for n, _ in net.named_parameters()]).numpy()
    f, theta = _flat_loss(net, batch, 0.1, 0.2)
    fd = finite_diff_grad(f, theta, 1e-6)
    f(theta)
    assert np.all(np.abs(an - fd) <= 1e-3 * np.maximum(1.0, np.abs(fd)))


def test_penalty_off_equals_plain_infonce_gradient():
    net = _net(2, d_S=2)
    batch = _batch(np.random.default_rng(2))
    g = N.grad_of_loss_with_penalty(net, batch, 0.0, 0.0)
    x, m, cand = N.batch_tensors(net, batch)
    s = N.candidate_scores(net, x[None], m[None], cand[None])[0]
    loss = N.info_nce(s).mean()
    ref = torch.autograd.grad(loss, list(net.parameters()))
    for (name, _), r in zip(net.named_parameters(), ref):
        assert torch.allclose(g[name], r, atol=1e-12)


def test_zero_weight_net_has_no_gradient_penalty_contribution():
    net = _net(4, d_S=2)
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    batch = _batch(np.random.default_rng(4))
    a = N.grad_of_loss_with_penalty(net, batch, 0.0, 0.0)
    b = N.grad_of_loss_with_penalty(net, batch, 0.0, 5.0)
    for k in a:
        assert torch.equal(a[k], b[k])


def test_adam_zero_gradient_leaves_params():
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0]))
    st = N.make_adam([p])
    N.adam_step([p], [torch.zeros(2)], st)
    assert torch.equal(p.detach(), torch.tensor([1.0, -2.0]))
    assert st.step == 1


def test_adam_first_step_magnitude():
    p = torch.nn.Parameter(torch.tensor([0.0], dtype=torch.float64))
    st = N.make_adam([p], lr=3e-4)
    N.adam_step([p], [torch.tensor([1.0], dtype=torch.float64)], st)
    assert float(p.detach()) == pytest.approx(-3e-4, rel=1e-6)


def test_adam_constant_gradient_step_tends_to_lr():
    p = torch.nn.Parameter(torch.tensor([0.0], dtype=torch.float64))
    st = N.make_adam([p], lr=1e-3)
    prev = 0.0
    for _ in range(2000):
        N.adam_step([p], [torch.tensor([0.5], dtype=torch.float64)], st)
        delta, prev = float(p.detach()) - prev, float(p.detach())
    assert delta == pytest.approx(-1e-3, rel=1e-3)


def test_adam_shape_mismatch_rejected():
    p = torch.nn.Parameter(torch.zeros(2))
    with pytest.raises(ValueError):
        N.adam_step([p], [torch.zeros(3)], N.make_adam([p]))


def test_fixed_seed_initialization_identical():
    a, b = _net(7), _net(7)
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)


def test_init_bound_uses_fan_in():
    net = _net(0, trunk=(50,))
    w = net.trunk.weights[0]
    assert float(w.detach().abs().max()) <= math.sqrt(1 / w.shape[1])


def test_checkpoint_round_trip(tmp_path):
    net = N.ScoreNet(3, 1, [0, 1, 2], (8,), (4,), 5, generator=torch.Generator().manual_seed(0))
    paths = []
    for o in range(3):
        paths.append(tmp_path / f"s{o}.json")
        N.save_checkpoint(net, paths[-1], owner=o)
    back = N.load_checkpoints(paths)
    x = np.array([0.1, 0.2, -0.3, 0.5])
    for o in range(3):
        assert abs(N.score(net, 0.4, x, N.full_mask(3), o) - N.score(back, 0.4, x, N.full_mask(3), o)) < 1e-6
