import numpy as np
import pytest

from gradmorph import tensor_core as tc
from gradmorph.metrics import TranslationLossConfig, translation_loss
from gradmorph.segnet import SegNetConfig, build_segnet, save_segnet
from gradmorph.translator import (TranslatorConfig, build_translator, head, load_translator,
                                  param_shapes, reconstruction_fidelity, save_translator,
                                  train_translator, translate, translate_batch)
from gradmorph.tensor_core import ContractViolation

TINY = TranslatorConfig(blocks=1, growth_channels=2, layers_per_block=2, stem_channels=3)


def nonzero_head(model, seed=0):
    m = model.copy()
    r = np.random.default_rng(seed)
    m.params["head.w"] = r.standard_normal(m.params["head.w"].shape) * 0.1
    for k in m.params:
        if k.endswith(".b"):
            m.params[k] = r.uniform(0.01, 0.1, m.params[k].shape)
    return m


def test_default_parameter_count_matches_hand_count():
    def k(a, b, s=3):
        return s * s * a * b + b

    def dense(c):
        return sum(k(c + 8 * j, 8) for j in range(3))

    # stem 16; down blocks grow 16->40->64; up blocks see 24 new maps plus the skip
    total = (k(1, 16) + dense(16) + k(40, 40, 1) + dense(40) + k(64, 64, 1) + dense(64)
             + k(24, 24) + dense(24 + 64) + k(24, 24) + dense(24 + 40) + k(88, 1, 1))
    assert total == 83977
    assert sum(int(np.prod(s)) for s in param_shapes(TranslatorConfig()).values()) == total


def test_build_is_seeded_and_starts_as_identity():
    a, b = build_translator(TINY, 3), build_translator(TINY, 3)
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    assert not a.params["head.w"].any()
    x = np.random.default_rng(0).random((1, 8, 8))
    np.testing.assert_array_equal(translate(a, x).data, x)


@pytest.mark.parametrize("shape", [(1, 4, 4), (1, 8, 12), (3, 1, 16, 8)])
def test_shape_preservation_and_determinism(shape):
    m = nonzero_head(build_translator(TINY, 1))
    x = np.random.default_rng(2).random(shape)
    y1, y2 = translate(m, x).data, translate(m, x).data
    assert y1.shape == x.shape
    assert y1.tobytes() == y2.tobytes()


def test_shape_contracts():
    m = build_translator(TINY, 0)
    with pytest.raises(ContractViolation, match="multiples of 2"):
        translate(m, np.zeros((1, 5, 4)))
    with pytest.raises(ContractViolation):
        translate(m, np.zeros((2, 4, 4)))
    with pytest.raises(ContractViolation):
        TranslatorConfig(blocks=0).validate()


def test_default_model_runs_on_desk_size():
    m = nonzero_head(build_translator(TranslatorConfig(), 0))
    x = np.random.default_rng(3).random((1, 16, 16))
    assert translate(m, x).shape == (1, 16, 16)


def test_head_is_linear_under_large_features():
    r = np.random.default_rng(4)
    feats = r.choice([-1e6, 1e6], size=(5, 4, 4)) * r.random((5, 4, 4))
    p = {"head.w": r.standard_normal((1, 5, 1, 1)), "head.b": np.array([0.25])}
    out = head(feats, p, residual=False).data
    expect = np.einsum("oc,chw->ohw", p["head.w"][:, :, 0, 0], feats) + 0.25
    np.testing.assert_allclose(out, expect, rtol=1e-12)
    assert out.min() < -1e5 and out.max() > 1e5
    img = r.random((1, 4, 4))
    np.testing.assert_array_equal(head(feats, p, img).data, out + img)


def test_parameter_gradients_match_finite_differences():
    m = nonzero_head(build_translator(TINY, 5), 6)
    x = np.random.default_rng(7).random((2, 1, 8, 8))
    t = np.random.default_rng(8).random((2, 1, 8, 8))
    names = list(m.params)
    for name in ["stem.w", "down0.layer1.w", "up0.transition.b", "head.w"]:
        i = names.index(name)

        def loss(*ps):
            return translation_loss(translate(m, x, dict(zip(names, ps))), t)

        err, _, _ = tc.gradcheck(loss, [m.params[n] for n in names], which=i, h=1e-6)
        assert err <= 1e-4, name


def pairs_for(n, size=8, seed=0):
    r = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        img = r.random((1, size, size))
        out.append((img, img + 0.3 * np.sign(img - 0.5)))
    return out


def test_zero_epochs_identity_and_determinism():
    m = build_translator(TINY, 0)
    pairs = pairs_for(4)
    same, curve = train_translator(m, pairs, 0)
    assert curve == []
    assert all(same.params[k].tobytes() == m.params[k].tobytes() for k in m.params)
    a, ca = train_translator(m, pairs, 2, batch_size=2, seed=1)
    b, cb = train_translator(m, pairs, 2, batch_size=2, seed=1)
    assert ca == cb
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


def test_lambda_is_wired_into_training():
    m = build_translator(TINY, 0)
    pairs = pairs_for(4)
    a, _ = train_translator(m, pairs, 2, loss_cfg=TranslationLossConfig(lam=0.0))
    b, _ = train_translator(m, pairs, 2, loss_cfg=TranslationLossConfig(lam=1.0))
    assert any(not np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_training_loss_decreases():
    m = build_translator(TINY, 0)
    _, curve = train_translator(m, pairs_for(8), 15, batch_size=4)
    assert all(np.isfinite(curve))
    assert curve[-1] <= curve[0] * 1.05
    assert min(curve[-3:]) < curve[0]


def test_single_pair_overfit():
    cfg = TranslatorConfig(blocks=1, growth_channels=4, layers_per_block=2, stem_channels=8)
    pair = pairs_for(1, size=8, seed=3)
    m, _ = train_translator(build_translator(cfg, 0), pair, 400, batch_size=1)
    out = translate(m, pair[0][0])
    assert translation_loss(out, pair[0][1]).item() <= 0.05


def test_empty_or_ragged_pairs_are_rejected():
    m = build_translator(TINY, 0)
    with pytest.raises(ContractViolation):
        train_translator(m, [], 1)
    with pytest.raises(ContractViolation):
        train_translator(m, [(np.zeros((1, 8, 8)), np.zeros((1, 4, 4)))], 1)


def test_reconstruction_fidelity():
    m = build_translator(TINY, 0)
    r = np.random.default_rng(9)
    imgs = [r.random((1, 8, 8)) for _ in range(3)]
    perfect = reconstruction_fidelity(m, ["a", "b", "c"], [(i, i) for i in imgs])
    np.testing.assert_allclose(perfect.column("ssim"), 1.0, atol=1e-12)
    noisy = reconstruction_fidelity(m, ["a", "b", "c"], [(i, r.random((1, 8, 8))) for i in imgs])
    assert noisy.aggregates["ssim"][0] < 0.5
    np.testing.assert_array_equal(translate_batch(m, np.stack(imgs), chunk=2), np.stack(imgs))


def test_checkpoint_round_trip_and_kind_check(tmp_path):
    m = nonzero_head(build_translator(TINY, 10))
    save_translator(tmp_path / "t.ckpt", m)
    back = load_translator(tmp_path / "t.ckpt")
    assert back.config == m.config
    assert all(back.params[k].tobytes() == m.params[k].tobytes() for k in m.params)
    save_segnet(tmp_path / "s.ckpt", build_segnet(SegNetConfig(depth=1, base_channels=2), 0))
    with pytest.raises(ContractViolation, match="segnet"):
        load_translator(tmp_path / "s.ckpt")
