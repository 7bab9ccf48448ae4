import math

import numpy as np
import pytest

from cersdx.bags import EmbeddingBag, SyntheticSpec, generate_synthetic_bags, stratified_kfold
from cersdx.errors import DataError
from cersdx.mil import (
    GatedMilModel,
    MilConfig,
    PARAM_NAMES,
    mil_forward,
    mil_gradients,
    mil_loss_and_gradients,
    sample_masks,
    top_k_patches,
    train_mil,
)

from gradcheck import check_seed, relative_error, numeric_gradients


def tiny_model(seed=0, **kw):
    return GatedMilModel.init(4, 2, latent=3, hidden=2, dropout=0.0, seed=seed, **kw)


def test_singleton_attention():
    _, att = mil_forward(np.ones((1, 4)), tiny_model())
    assert att.tolist() == [1.0]


def test_identical_instances_uniform():
    _, att = mil_forward(np.tile([0.3, -1, 2, 0.5], (5, 1)), tiny_model())
    np.testing.assert_allclose(att, 0.2, atol=1e-15)


def scalar_forward(X, p):
    """Element-by-element evaluation of the gated-attention formulas."""
    L, D = len(p["W1"]), len(p["W1"][0])
    H = len(p["Va"])
    hs, scores = [], []
    for x in X:
        h = []
        for j in range(L):
            s = p["b1"][j]
            for k in range(D):
                s += p["W1"][j][k] * x[k]
            h.append(max(s, 0.0))
        score = 0.0
        for m in range(H):
            a = p["ba"][m] + sum(p["Va"][m][j] * h[j] for j in range(L))
            g = p["bu"][m] + sum(p["Ua"][m][j] * h[j] for j in range(L))
            score += p["w"][0][m] * math.tanh(a) * (1.0 / (1.0 + math.exp(-g)))
        hs.append(h)
        scores.append(score)
    mx = max(scores)
    e = [math.exp(s - mx) for s in scores]
    att = [v / sum(e) for v in e]
    z = [sum(att[i] * hs[i][j] for i in range(len(X))) for j in range(L)]
    logits = [p["bc"][c] + sum(p["Wc"][c][j] * z[j] for j in range(L)) for c in range(len(p["Wc"]))]
    return logits, att


def test_hand_evaluation():
    rng = np.random.default_rng(3)
    model = tiny_model()
    for k in model.params:
        model.params[k] = np.round(rng.normal(0, 0.5, size=model.params[k].shape), 2)
    X = np.round(rng.normal(size=(4, 4)), 2)
    logits, att = mil_forward(X, model)
    ref_logits, ref_att = scalar_forward(X.tolist(), {k: v.tolist() for k, v in model.params.items()})
    np.testing.assert_allclose(logits, ref_logits, atol=1e-12, rtol=0)
    np.testing.assert_allclose(att, ref_att, atol=1e-12, rtol=0)


def test_dimension_mismatch():
    with pytest.raises(DataError):
        mil_forward(np.ones((3, 5)), tiny_model())


def test_attention_sums_to_one_and_permutation_invariance(rng):
    model = GatedMilModel.init(8, 3, latent=16, hidden=8, seed=2)
    for _ in range(10):
        X = rng.standard_normal((int(rng.integers(1, 30)), 8))
        logits, att = mil_forward(X, model)
        assert np.all(att >= 0) and abs(att.sum() - 1) < 1e-12
        perm = rng.permutation(len(X))
        l2, a2 = mil_forward(X[perm], model)
        np.testing.assert_allclose(l2, logits, atol=1e-12)
        np.testing.assert_allclose(a2, att[perm], atol=1e-12)


def test_eval_is_pure(rng):
    model = GatedMilModel.init(8, 2, latent=16, hidden=8, seed=2)
    X = rng.standard_normal((6, 8))
    a = mil_forward(X, model)
    b = mil_forward(X, model)
    assert a[0].tobytes() == b[0].tobytes()


def test_train_mode_uses_dropout(rng):
    model = GatedMilModel.init(8, 2, latent=16, hidden=8, dropout=0.25, seed=2)
    X = rng.standard_normal((6, 8))
    a, _ = mil_forward(X, model, "train", np.random.default_rng(0))
    b, _ = mil_forward(X, model, "eval")
    assert not np.allclose(a, b)


def test_zero_model_bias_gradient():
    model = tiny_model()
    for v in model.params.values():
        v[...] = 0
    for label in (0, 1):
        g = mil_gradients(np.ones((3, 4)), label, model)
        np.testing.assert_allclose(g["bc"], np.array([0.5, 0.5]) - np.eye(2)[label])


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("multi_branch", [False, True])
def test_gradcheck(seed, multi_branch):
    errs = check_seed(seed, multi_branch=multi_branch, n_classes=3 if multi_branch else 2)
    assert max(errs.values()) < 1e-5, errs


def test_gradcheck_with_fixed_dropout_masks(rng):
    model = GatedMilModel.init(5, 2, latent=6, hidden=4, dropout=0.25, seed=1)
    X = rng.standard_normal((4, 5))
    masks = sample_masks(model, 4, rng)
    _, g = mil_loss_and_gradients(X, 1, model, masks)

    from cersdx.mil import cross_entropy, forward_cache

    def loss():
        return cross_entropy(forward_cache(X, model, masks)[0], 1)

    for name in PARAM_NAMES:
        p = model.params[name].reshape(-1)
        num = np.zeros_like(p)
        for i in range(p.size):
            old = p[i]
            p[i] = old + 1e-5
            up = loss()
            p[i] = old - 1e-5
            num[i] = (up - loss()) / 2e-5
            p[i] = old
        assert relative_error(g[name].reshape(-1), num) < 1e-5, name


def test_gradients_deterministic(rng):
    model = GatedMilModel.init(5, 2, latent=6, hidden=4, seed=1)
    X = rng.standard_normal((4, 5))
    a, b = mil_gradients(X, 0, model), mil_gradients(X, 0, model)
    assert all(a[k].tobytes() == b[k].tobytes() for k in PARAM_NAMES)


def small_cohort(seed=0):
    c = generate_synthetic_bags(SyntheticSpec(n_bags=20, n_instances=12, dim=8, k_signal=2, seed=seed))
    return c


CFG = MilConfig(lr=1e-3, max_epochs=4, patience=3, latent=16, hidden=8, seed=5)


def test_train_deterministic_and_history():
    c = small_cohort()
    split = stratified_kfold(c.labels, 5, 0)
    tr, va, _ = split.train_val_test(0)
    m1, h1 = train_mil(c.bags, c.labels, tr, va, CFG)
    m2, h2 = train_mil(c.bags, c.labels, tr, va, CFG)
    assert h1.train_loss == h2.train_loss and h1.val_loss == h2.val_loss
    assert all(m1.params[k].tobytes() == m2.params[k].tobytes() for k in PARAM_NAMES)
    assert 0 <= h1.best_epoch < len(h1.val_loss)
    assert h1.val_loss[h1.best_epoch] == min(h1.val_loss)


def test_train_single_class_error():
    c = small_cohort()
    with pytest.raises(DataError):
        train_mil(c.bags, c.labels, np.arange(5), None, CFG)


def test_train_learns_small_problem():
    c = small_cohort(1)
    cfg = MilConfig(lr=1e-3, max_epochs=15, patience=15, latent=32, hidden=16, seed=0)
    split = stratified_kfold(c.labels, 5, 0)
    tr, va, te = split.train_val_test(0)
    model, _ = train_mil(c.bags, c.labels, np.concatenate([tr, va]), va, cfg)
    pred = [int(np.argmax(mil_forward(c.bags[i], model)[0])) for i in te]
    assert np.mean(np.array(pred) == c.labels[te]) >= 0.75


def test_topk_edges(rng):
    model = GatedMilModel.init(4, 2, latent=6, hidden=4, seed=0)
    X = rng.standard_normal((7, 4))
    bag = EmbeddingBag("b", X, np.arange(14).reshape(7, 2))
    coords, att, idx = top_k_patches(bag, model, 7)
    assert len(coords) == 7 and np.all(np.diff(att) <= 0)
    assert np.array_equal(coords, bag.coords[idx])
    assert len(top_k_patches(bag, model, 0)[0]) == 0
    assert len(top_k_patches(bag, model, 50)[0]) == 7


def test_topk_ties_by_index():
    model = tiny_model()
    bag = EmbeddingBag("b", np.ones((4, 4)), None)
    assert top_k_patches(bag, model, 4)[2].tolist() == [0, 1, 2, 3]


def test_model_round_trip(tmp_path):
    model = GatedMilModel.init(4, 3, latent=6, hidden=4, multi_branch=True, seed=0)
    model.save(tmp_path / "m.json")
    back = GatedMilModel.load(tmp_path / "m.json")
    assert back.multi_branch and back.n_classes == 3
    assert all(np.array_equal(back.params[k], model.params[k]) for k in PARAM_NAMES)


def test_init_rejects_bad_dropout():
    with pytest.raises(ValueError):
        GatedMilModel.init(4, 2, dropout=1.0)
