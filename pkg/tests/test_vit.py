import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fate import vit
from fate.checkpoint import content_hash
from fate.tensor import Tape, Tensor
from fate.text import ContextPrompt

from conftest import make_dual, make_vision_model


@pytest.fixture(scope="module")
def bb():
    return vit.VisionBackbone(seed=0, dtype=np.float64).freeze()


def test_patch_counts():
    assert vit.VisionBackbone(image_size=32, patch=4, depth=1).m == 64
    assert vit.VisionBackbone(image_size=28, patch=7, depth=1).m == 16
    with pytest.raises(ValueError):
        vit.VisionBackbone(image_size=30, patch=7, depth=1)
    b = vit.VisionBackbone(image_size=28, patch=7, depth=1)
    with pytest.raises(ValueError):
        b.embed_patches(np.zeros((1, 27, 28, 1)))


def test_zero_image_with_zero_table_embeds_to_zero():
    b = vit.VisionBackbone(depth=1)
    b.patch.pos.data[:] = 0
    b.patch.proj.b.data[:] = 0
    # pixels are centred at 0.5 before the projection
    E = b.embed_patches(np.full((1, 28, 28, 1), 0.5, np.float32))
    assert E.shape == (1, 16, 64)
    assert not E.data.any()


def test_patch_rows_are_row_major(bb):
    img = np.zeros((28, 28, 1))
    img[7:14, 0:7] = 1.0      # patch row 1, col 0 -> index 4
    flat = bb.patch.patches(img)
    hot = np.flatnonzero(flat[0].sum(axis=1))
    assert hot.tolist() == [4]


@settings(max_examples=12, deadline=None)
@given(st.integers(0, 3), st.integers(0, 3))
def test_length_contract(n_dp, n_cp):
    b = vit.VisionBackbone(depth=1)
    prompts = []
    if n_dp:
        prompts.append(vit.PromptSet(n_dp, 64, "DP"))
    if n_cp:
        prompts.append(vit.PromptSet(n_cp, 64, "CP"))
    out = b.encode(np.zeros((2, 28, 28, 1), np.float32), prompts)
    assert out.shape == (2, 1 + n_dp + n_cp + 16, 64)
    assert b.sequence_length(prompts) == out.shape[1]


def test_reference_lengths_32px_patch4():
    b = vit.VisionBackbone(image_size=32, patch=4, depth=1)
    dp, cp = vit.PromptSet(12, 64, "DP"), vit.PromptSet(12, 64, "CP")
    assert b.sequence_length([dp, cp]) == 89
    assert b.sequence_length([]) == 65


def test_dimension_mismatch(bb):
    with pytest.raises(ValueError):
        bb.encode(np.zeros((1, 28, 28, 1)), [Tensor(np.zeros((3, 32)))])
    with pytest.raises(ValueError):
        vit.PromptSet(0, 64, "DP")
    with pytest.raises(ValueError):
        vit.PromptSet(2, 64, "XX")


def test_prompt_permutation_equivariance(bb):
    rng = np.random.default_rng(0)
    img = rng.random((2, 28, 28, 1))
    dp = vit.PromptSet(5, 64, "DP", rng, dtype=np.float64)
    cp = vit.PromptSet(4, 64, "CP", rng, dtype=np.float64)
    base = bb.encode(img, [dp, cp]).data
    perm = rng.permutation(4)
    cp_perm = vit.PromptSet(4, 64, "CP", init=cp.tokens.data[perm], dtype=np.float64)
    out = bb.encode(img, [dp, cp_perm]).data
    np.testing.assert_allclose(out[:, 6:10], base[:, 6:10][:, perm], atol=1e-12)
    np.testing.assert_allclose(out[:, 0], base[:, 0], atol=1e-12)
    np.testing.assert_allclose(out[:, 10:], base[:, 10:], atol=1e-12)


def test_attention_rows_are_distributions(bb):
    probe = []
    bb.encode(np.random.default_rng(1).random((2, 28, 28, 1)), [vit.PromptSet(3, 64, "DP", dtype=np.float64)],
              probe=probe)
    assert len(probe) == 4
    for a in probe:
        np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-6)


@pytest.mark.parametrize("stage,expected", [
    ("vision-adapt", {"dp", "projector"}),
    ("vision-classify", {"cp", "head"}),
])
def test_trainable_parameters_vision(stage, expected):
    m = make_vision_model()
    params = vit.trainable_parameters(m, stage)
    prefixes = {k.split(".")[0] for k in params}
    assert prefixes == expected
    backbone_names = set(m.backbone.parameters())
    assert not backbone_names & set(params)
    assert all(not p.trainable for p in m.backbone.parameters().values())


def test_trainable_parameters_vl():
    dual = make_dual()
    m = dual.model()
    m.dp = vit.PromptSet(2, 64, "DP")
    m.text_ctx = ContextPrompt(3, 64)
    assert set(vit.trainable_parameters(m, "vl-adapt")) == {"dp.tokens"}
    assert set(vit.trainable_parameters(m, "vl-classify")) == {"text_ctx.tokens"}
    with pytest.raises(ValueError):
        vit.trainable_parameters(m, "bogus")


def test_frozen_backbone_gets_no_gradient():
    m = make_vision_model()
    vit.trainable_parameters(m, "vision-adapt")
    with Tape() as tape:
        loss = m.projector(m.backbone.encode(np.zeros((1, 28, 28, 1), np.float32), [m.dp])[:, 0]).sum()
    assert set(tape.backprop(loss)) <= set(m.dp.parameters()) | set(m.projector.parameters())


def test_checkpoint_round_trip_reproduces_forward(tmp_path):
    b = vit.VisionBackbone(depth=2, seed=3)
    vit.save_backbone(b, tmp_path, dict(aux_classes=["a"]))
    back = vit.load_backbone(tmp_path)
    img = np.random.default_rng(0).random((3, 28, 28, 1)).astype(np.float32)
    assert back.encode(img).data.tobytes() == b.encode(img).data.tobytes()
    assert content_hash(back.state_dict()) == content_hash(b.state_dict())
    assert back.frozen


def test_pretrain_rejects_overlap(tiny_task):
    aux, train, _ = tiny_task
    with pytest.raises(ValueError):
        vit.pretrain_backbone(aux, [aux.class_names[0]], epochs=1)


def test_pretrain_tiny_run_freezes(tiny_task):
    aux, train, _ = tiny_task
    b, report = vit.pretrain_backbone(aux, train.class_names, depth=1, epochs=1, batch=16)
    assert b.frozen and all(not p.trainable for p in b.parameters().values())
    assert 0.0 <= report["held_out_accuracy"] <= 1.0
