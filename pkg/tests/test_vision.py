import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fate import vision, vit
from fate.checkpoint import content_hash
from fate.data import BatchSampler
from fate.gradcheck import check_gradients
from fate.optim import OptimizerState
from fate.tensor import Tape, Tensor
from fate.vision import ClassificationConfig, ClassificationInputs, nt_xent_loss, pseudo_label

from conftest import make_vision_model


def naive_nt_xent(z1, z2, tau):
    z = np.concatenate([z1, z2]).astype(np.float64)
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    n2 = len(z)
    half = n2 // 2
    total = 0.0
    for i in range(n2):
        j = (i + half) % n2
        num = math.exp(float(z[i] @ z[j]) / tau)
        den = sum(math.exp(float(z[i] @ z[k]) / tau) for k in range(n2) if k != i)
        total -= math.log(num / den)
    return total


def test_nt_xent_single_pair_is_zero():
    z = Tensor(np.array([[1.0, 2.0, 3.0]]))
    assert nt_xent_loss(z, Tensor(np.array([[-1.0, 0.5, 0.0]])), 0.5).item() == 0.0


def test_nt_xent_orthonormal_example():
    e1, e2 = np.eye(2)
    z1 = Tensor(np.stack([e1, e2]))
    z2 = Tensor(np.stack([e1, e2]))
    per_anchor = -math.log(math.e ** 2 / (math.e ** 2 + 2))
    assert per_anchor == pytest.approx(0.2395, abs=1e-4)
    assert nt_xent_loss(z1, z2, 0.5).item() == pytest.approx(4 * per_anchor, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 8), st.integers(2, 6), st.floats(0.1, 2.0), st.integers(0, 10 ** 6))
def test_nt_xent_matches_double_loop(n, d, tau, seed):
    rng = np.random.default_rng(seed)
    z1, z2 = rng.normal(size=(n, d)) + 0.1, rng.normal(size=(n, d)) + 0.1
    got = nt_xent_loss(Tensor(z1), Tensor(z2), tau).item()
    assert got == pytest.approx(naive_nt_xent(z1, z2, tau), rel=1e-6, abs=1e-6)
    perm = rng.permutation(n)
    assert nt_xent_loss(Tensor(z1[perm]), Tensor(z2[perm]), tau).item() == pytest.approx(got, abs=1e-6)


def test_nt_xent_errors():
    with pytest.raises(ZeroDivisionError):
        nt_xent_loss(Tensor(np.array([[0.0, 0.0], [1.0, 0.0]])), Tensor(np.ones((2, 2))), 0.5)
    with pytest.raises(ValueError):
        nt_xent_loss(Tensor(np.ones((2, 2))), Tensor(np.ones((3, 2))), 0.5)
    with pytest.raises(ValueError):
        vision.AdaptationConfig(tau=0.0)


@pytest.mark.parametrize("q,theta,cls,mask", [
    ([0.96, 0.04], 0.95, 0, 1.0),
    ([0.5, 0.5], 0.95, 0, 0.0),
    ([0.5, 0.5], 0.4, 0, 1.0),
    ([0.1, 0.2, 0.7], 0.7, 2, 1.0),
])
def test_pseudo_label_examples(q, theta, cls, mask):
    onehot, m = pseudo_label(np.array(q), theta)
    assert int(np.argmax(onehot)) == cls and onehot.sum() == 1
    assert m == mask


distributions = hnp.arrays(np.float64, st.tuples(st.integers(1, 20), st.integers(2, 6)),
                           elements=st.floats(0.01, 1.0)).map(lambda a: a / a.sum(axis=1, keepdims=True))


@settings(max_examples=50, deadline=None)
@given(distributions, st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_raising_theta_never_unmasks(q, t1, t2):
    lo, hi = sorted((t1, t2))
    assert pseudo_label(q, hi)[1].sum() <= pseudo_label(q, lo)[1].sum()


# ---------------------------------------------------------------------------
# classification losses
# ---------------------------------------------------------------------------

def _inputs(model, n_l=3, n_u=4, seed=0, theta=0.5):
    rng = np.random.default_rng(seed)
    x_l = rng.random((n_l, 28, 28, 1)).astype(np.float32)
    u_w = rng.random((n_u, 28, 28, 1)).astype(np.float32)
    u_s = rng.random((n_u, 28, 28, 1)).astype(np.float32)
    q = rng.dirichlet(np.ones(5) * 0.2, n_u)
    pseudo, mask = pseudo_label(q, theta)
    return ClassificationInputs(x_l, rng.integers(0, 5, n_l), u_w, u_s, pseudo.astype(np.float32),
                                mask.astype(np.float32))


def _trace_lengths(model, fn):
    lengths = []
    real = model.backbone.encode

    def spy(images, prompts=(), **kw):
        out = real(images, prompts, **kw)
        lengths.append(out.shape[1])
        return out

    model.backbone.encode = spy
    try:
        fn()
    finally:
        del model.backbone.encode
    return lengths


def test_branch_token_counts(vision_model):
    m = vision_model
    inp = _inputs(m)
    cfg = ClassificationConfig()
    lengths = _trace_lengths(m, lambda: vision.classification_losses(m, inp, cfg))
    # labeled branch then strong branch
    assert lengths == [1 + 12 + 12 + 16, 1 + 12 + 16]
    placed = _trace_lengths(m, lambda: vision.classification_losses(m, inp, ClassificationConfig(dp_on_strong=True)))
    assert placed == [41, 41]
    assert m.backbone.sequence_length([m.dp, m.cp]) == 41


def test_full_masking_reduces_to_supervised(vision_model):
    m = vision_model
    vit.trainable_parameters(m, "vision-classify")
    inp = _inputs(m, theta=1.0 + 1e-6)
    assert not inp.mask.any()
    with Tape() as tape:
        l_s, l_u, total = vision.classification_losses(m, inp, ClassificationConfig(theta=1.0 + 1e-6))
    g_total = tape.backprop(total)
    assert l_u.item() == 0.0
    with Tape() as tape:
        l_s_only = vision.classification_losses(m, inp, ClassificationConfig())[0]
    g_s = tape.backprop(l_s_only)
    assert set(g_total) == set(g_s) == set(vit.trainable_parameters(m, "vision-classify"))
    for k in g_s:
        assert g_total[k].tobytes() == g_s[k].tobytes()


def test_empty_unlabeled_gives_zero(vision_model):
    inp = _inputs(vision_model, n_u=0)
    inp.pseudo = np.zeros((0, 5), np.float32)
    inp.mask = np.zeros(0, np.float32)
    assert vision.classification_losses(vision_model, inp, ClassificationConfig())[1].item() == 0.0


def test_lu_averages_over_all_unlabeled_terms(vision_model):
    m = vision_model
    inp = _inputs(m, n_u=4, theta=0.0)
    inp.mask = np.array([1, 0, 1, 0], np.float32)
    _, l_u, _ = vision.classification_losses(m, inp, ClassificationConfig())
    logits = vision.logits_for(m.backbone, inp.u_s, [m.cp], m.cp, m.head).data.astype(np.float64)
    logp = logits - np.log(np.exp(logits - logits.max(1, keepdims=True)).sum(1, keepdims=True)) - logits.max(1, keepdims=True)
    ce = -logp[np.arange(4), np.argmax(inp.pseudo, axis=1)]
    assert l_u.item() == pytest.approx((ce[0] + ce[2]) / 4, rel=1e-5)


def _train_steps(model, train, split, cfg, steps, seed=0):
    sampler = BatchSampler(split, train.labels, train.num_classes, cfg.B, cfg.mu, np.random.default_rng(5))
    opt = OptimizerState(total_steps=steps, lr0=cfg.lr)
    stats = [vision.classification_step(model, train, sampler.sample(), opt, cfg, seed) for _ in range(steps)]
    return stats


def test_lambda_zero_equals_full_masking(tiny_task, tiny_split):
    _, train, _ = tiny_task
    states = []
    for cfg in (ClassificationConfig(lam=0.0, B=4, mu=2), ClassificationConfig(theta=1.0 + 1e-6, B=4, mu=2)):
        m = make_vision_model()
        _train_steps(m, train, tiny_split, cfg, 3)
        states.append(content_hash({**m.cp.state_dict(), **m.head.state_dict()}))
    assert states[0] == states[1]


def test_classification_step_freezes_dp_and_backbone(tiny_task, tiny_split):
    _, train, _ = tiny_task
    m = make_vision_model()
    before = content_hash({**m.backbone.state_dict(), **m.dp.state_dict()})
    cp_before = m.cp.tokens.data.copy()
    stats = _train_steps(m, train, tiny_split, ClassificationConfig(B=4, mu=1, theta=0.3), 100)
    assert content_hash({**m.backbone.state_dict(), **m.dp.state_dict()}) == before
    assert not np.array_equal(m.cp.tokens.data, cp_before)
    assert all(0.0 <= s["mask_rate"] <= 1.0 for s in stats)


def test_adaptation_step_moves_dp_only(tiny_task):
    _, train, _ = tiny_task
    m = make_vision_model()
    bb_hash = content_hash(m.backbone.state_dict())
    dp_before = m.dp.tokens.data.copy()
    opt = OptimizerState(total_steps=1, lr0=0.1)
    loss = vision.adaptation_step(m, train, np.arange(4), opt, vision.AdaptationConfig(), 0, 0)
    assert np.isfinite(loss)
    assert content_hash(m.backbone.state_dict()) == bb_hash
    assert not np.array_equal(m.dp.tokens.data, dp_before)
    with pytest.raises(ValueError):
        vision.adaptation_step(m, train, np.arange(0), opt, vision.AdaptationConfig(), 0, 0)


def test_matching_views_beat_mismatched_pairs():
    m = make_vision_model(np.float64)
    imgs = np.random.default_rng(0).random((6, 28, 28, 1))
    same = vision.adaptation_loss(m.backbone, m.dp, m.projector, imgs, imgs, 0.5).item()
    shuffled = vision.adaptation_loss(m.backbone, m.dp, m.projector, imgs, np.roll(imgs, 1, axis=0), 0.5).item()
    assert same < shuffled


def test_gradients_float64():
    m = make_vision_model(np.float64, n_dp=3, n_cp=3)
    rng = np.random.default_rng(0)
    v1, v2 = rng.random((3, 28, 28, 1)), rng.random((3, 28, 28, 1))
    params = vit.trainable_parameters(m, "vision-adapt")
    worst = check_gradients(lambda: vision.adaptation_loss(m.backbone, m.dp, m.projector, v1, v2, 0.5),
                            {k: v for k, v in params.items() if k.startswith("dp")}, n_coords=10, rng=rng)
    assert worst < 1e-5
    inp = _inputs(m, theta=0.3)
    params = vit.trainable_parameters(m, "vision-classify")
    worst = check_gradients(lambda: vision.classification_losses(m, inp, ClassificationConfig())[2],
                            {k: v for k, v in params.items() if k.startswith("cp")}, n_coords=10, rng=rng)
    assert worst < 1e-5


def test_classify_is_deterministic_and_batch_invariant(vision_model, tiny_task):
    _, _, test = tiny_task
    imgs = test.images[:6]
    batched = vision.classify(vision_model, imgs)
    single = [int(vision.classify(vision_model, img)[0]) for img in imgs]
    assert batched.tolist() == single
    assert vision.classify(vision_model, imgs).tolist() == batched.tolist()
    logits = vision.predict_logits(vision_model, imgs)
    np.testing.assert_allclose(vision.predict_logits(vision_model, imgs[:1]), logits[:1], rtol=1e-5, atol=1e-6)


def test_removing_dp_changes_logits(vision_model, tiny_task):
    imgs = tiny_task[2].images[:4]
    with_dp = vision.predict_logits(vision_model, imgs)
    without = vision.predict_logits(vision_model, imgs, use_dp=False)
    assert np.abs(with_dp - without).mean() > 1e-4


def test_cls_feature_when_cp_off(vision_model):
    m = vision_model
    imgs = np.random.default_rng(2).random((2, 28, 28, 1)).astype(np.float32)
    logits = vision.predict_logits(m, imgs, use_cp=False)
    cls = m.backbone.encode(imgs, [m.dp]).data[:, 0]
    np.testing.assert_allclose(logits, m.head(Tensor(cls)).data, rtol=1e-6)
