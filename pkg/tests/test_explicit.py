import math

import numpy as np
import pytest
import torch

from cbm import dynamics as D
from cbm import env as E
from cbm import explicit as X


def _setup(n=1000, seed=0, noise=0.0, widths=(32, 32)):
    env = E.make_copy_chain(n_core=3, noise_std=noise)
    buf = E.collect_dataset(env, n_transitions=n, seed=seed)
    cfg = D.DynConfig(trunk_widths=widths, batch_size=32)
    return env, buf, X.build_explicit(buf, cfg, seed, env.ranges)


def test_zero_steps_unchanged():
    _, buf, model = _setup(100)
    before = [p.detach().clone() for p in model.net.parameters()]
    X.train_explicit(model, buf, 0)
    for p, q in zip(model.net.parameters(), before):
        assert torch.equal(p, q)


def test_log_std_clamped():
    heads = X.GaussianHeads(3, (4,), 2, torch.Generator().manual_seed(0))
    with torch.no_grad():
        heads.mlp.biases[-1][..., 1] = 100.0
    _, ls = heads(torch.zeros(2, 5, 3))
    assert torch.all(ls == X.LOG_STD_MAX)
    with torch.no_grad():
        heads.mlp.biases[-1][..., 1] = -100.0
    _, ls = heads(torch.zeros(2, 5, 3))
    assert torch.all(ls == X.LOG_STD_MIN)


def test_log_std_stays_in_range_during_training():
    _, buf, model = _setup(500)
    x = model.context_tensor(buf.arrays()["s"], buf.arrays()["a"])
    for _ in range(5):
        X.train_explicit(model, buf, 40)
        _, ls = model.params(x)
        assert float(ls.detach().min()) >= X.LOG_STD_MIN and float(ls.detach().max()) <= X.LOG_STD_MAX


def test_gaussian_log_prob_matches_closed_form():
    y, mu, ls = torch.tensor([0.3]), torch.tensor([-0.2]), torch.tensor([0.4])
    sd = math.exp(0.4)
    ref = -0.5 * ((0.5 / sd) ** 2) - math.log(sd) - 0.5 * math.log(2 * math.pi)
    assert float(X.gaussian_log_prob(y, mu, ls)) == pytest.approx(ref, rel=1e-6)


def test_identical_predictions_give_zero_cmi():
    _, buf, model = _setup(100)
    with torch.no_grad():
        for w in model.net.mlp.weights:
            w.zero_()
    data = buf.take(np.arange(50))
    for j in range(model.n_units):
        assert X.explicit_cmi(model, 0, j, data) == 0.0


def test_constant_density_ratio_gives_ln2():
    # the masked head doubles its std while the mean sits on the label, so the full density is twice as large
    _, buf, model = _setup(100)
    data = buf.take(np.arange(50))

    def fake_params(x, mask=None):
        H, B = model.d_S, x.shape[0]
        ls = torch.zeros(H, B) if mask is None else torch.full((H, B), math.log(2))
        return torch.zeros(H, B), ls

    model.params = fake_params
    model.label_tensor = lambda s, s2: torch.zeros(model.d_S, len(s))
    assert X.explicit_cmi(model, 1, 0, data) == pytest.approx(math.log(2), abs=1e-6)


def test_masked_invariance():
    _, buf, model = _setup(100)
    x = torch.rand(4, 4)
    x2 = x.clone()
    x2[:, 2] = -3.0
    m = X.unit_drop_masks(torch.tensor(2), 3, 1)
    a, b = model.params(x, m), model.params(x2, m)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


def test_trained_copy_chain_beats_zero_change_baseline():
    _, buf, model = _setup(3000)
    X.train_explicit(model, buf, 2000)
    env = E.make_copy_chain(n_core=3)
    ev = E.collect_dataset(env, n_transitions=300, seed=77).arrays()
    pred = X.predict_mean(model, ev["s"], ev["a"])
    assert np.abs(pred - ev["s_next"]).mean() < np.abs(ev["s"] - ev["s_next"]).mean()


def test_cmi_matrix_shape_and_clamp():
    _, buf, model = _setup(300)
    X.train_explicit(model, buf, 50)
    m = X.explicit_cmi_matrix(model, buf, 100)
    assert m.values.shape == (4, 3) and np.all(m.values >= 0)
    assert m.estimator_kind == "explicit-likelihood"
    with pytest.raises(ValueError):
        X.explicit_cmi_matrix(model, buf, 5000)


def test_cmi_translation_invariant():
    env = E.make_copy_chain(n_core=2, noise_std=0.1)
    buf = E.collect_dataset(env, n_transitions=600, seed=1)
    shifted = E.ReplayBuffer(len(buf), 2, 1)
    d = buf.arrays()
    for k in range(len(buf)):
        shifted.add(d["s"][k] + 3.0, d["a"][k], d["r"][k], d["s_next"][k] + 3.0, bool(d["start"][k]))
    cfg = D.DynConfig(trunk_widths=(16,), batch_size=32)
    a = X.build_explicit(buf, cfg, 0)
    b = X.build_explicit(shifted, cfg, 0)
    X.train_explicit(a, buf, 200)
    X.train_explicit(b, shifted, 200)
    va = X.explicit_cmi_matrix(a, buf, 200, clamp=False).values
    vb = X.explicit_cmi_matrix(b, shifted, 200, clamp=False).values
    assert np.allclose(va, vb, atol=1e-4)


def test_save_load_round_trip(tmp_path):
    _, buf, model = _setup(200)
    X.train_explicit(model, buf, 5)
    back = X.load_explicit(X.save_explicit(model, tmp_path))
    s, a = buf.arrays()["s"][:4], buf.arrays()["a"][:4]
    assert np.allclose(X.predict_mean(model, s, a), X.predict_mean(back, s, a), atol=1e-6)
