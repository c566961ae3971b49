import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vtryon import oracles
from vtryon.losses import (DegenerateSampleWarning, FixedFeatureNet, LossWeights, gram, owl_loss, owl_mask,
                           perceptual_loss, stage1_loss, style_loss)
from vtryon.runtime import RunConfig, grad_check
from vtryon.stage1 import Stage1Output
from vtryon.synth import ArmBar, generate_dataset, GeneratorSpec, make_sample


def _t(a):
    return torch.from_numpy(np.asarray(a, dtype=np.float64))


def _output(warp_g, tryon_c):
    zeros = torch.zeros(warp_g.shape[0], 2, *warp_g.shape[-2:], dtype=warp_g.dtype)
    return Stage1Output(warp_g, tryon_c, zeros, zeros, zeros[:, :1])


@pytest.fixture(scope="module")
def net64():
    return FixedFeatureNet(dtype=torch.float64)


# --- occlusion-aware loss ----------------------------------------------------------------

def test_owl_full_mask_constant_difference():
    gt = torch.full((1, 3, 4, 4), 0.8, dtype=torch.float64)
    assert owl_loss(gt, gt - 0.5).item() == 0.5


def test_owl_left_half_mask():
    gt = torch.zeros(1, 3, 4, 6, dtype=torch.float64)
    gt[..., :3] = 0.6
    pred = gt.clone()
    pred[..., :3] -= 0.2
    pred[..., 3:] += 1.0
    assert owl_loss(gt, pred).item() == pytest.approx(0.2, abs=1e-15)


def test_owl_ignores_hole_pixels_bitwise():
    s = make_sample(occluder=ArmBar((8.0, 40.0), (40.0, 34.0), 3.0))
    gt = _t(s.gt_warp)[None]
    pred = _t(np.random.default_rng(0).uniform(-1, 1, size=gt.shape))
    holes = torch.from_numpy(s.occlusion_mask[0] == 0)
    perturbed = pred.clone()
    perturbed[..., holes] = torch.randn(int(holes.sum()) * 3, dtype=torch.float64).view(1, 3, -1)
    assert owl_loss(gt, pred).item() == owl_loss(gt, perturbed).item()


def test_owl_empty_mask_warns_and_returns_zero():
    pred = torch.rand(1, 3, 4, 4, dtype=torch.float64, requires_grad=True)
    with pytest.warns(DegenerateSampleWarning):
        value = owl_loss(torch.zeros(1, 3, 4, 4, dtype=torch.float64), pred)
    assert value.item() == 0.0
    value.backward()  # still differentiable, gradient zero
    assert torch.count_nonzero(pred.grad) == 0


def test_owl_shape_mismatch():
    with pytest.raises(ValueError):
        owl_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.0, 0.9))
def test_owl_random_holes_and_oracle(seed, hole_fraction):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(-1, 1, size=(3, 5, 4))
    holes = rng.uniform(size=(5, 4)) < hole_fraction
    gt[:, holes] = 0.0
    pred = rng.uniform(-1, 1, size=(3, 5, 4))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateSampleWarning)
        value = owl_loss(_t(gt)[None], _t(pred)[None]).item()
        pred2 = pred.copy()
        pred2[:, holes] = rng.uniform(-5, 5, size=(3, int(holes.sum())))
        assert owl_loss(_t(gt)[None], _t(pred2)[None]).item() == value
        match = pred.copy()
        match[:, ~holes] = gt[:, ~holes]
        assert owl_loss(_t(gt)[None], _t(match)[None]).item() == 0.0
    assert value >= 0
    assert value == pytest.approx(oracles.owl(gt, pred), abs=1e-12)


def test_owl_threshold_insensitive_on_synthetic_data():
    # only anti-aliased garment edges (blends with the -1 background that pass near 0) can flip
    rng = np.random.default_rng(5)
    for s in generate_dataset(GeneratorSpec(n_train=12, n_val=1, n_test=1), seed=2):
        gt = _t(s.gt_warp)[None]
        pred = _t(rng.uniform(-1, 1, size=gt.shape))
        masks = [owl_mask(gt, tau) for tau in (0.02, 0.05, 0.1)]
        assert (masks[0] != masks[2]).double().mean() < 0.01
        losses = [owl_loss(gt, pred, tau).item() for tau in (0.02, 0.05, 0.1)]
        assert max(losses) - min(losses) < 0.01 * losses[1]
        visible = _t(s.occlusion_mask[0])
        assert torch.all(masks[1][0, 0] <= visible)
        assert (masks[1][0, 0] != visible).double().mean() < 0.01


# --- perceptual and style ------------------------------------------------------------------

def test_feature_net_frozen_and_seeded():
    a, b = FixedFeatureNet(), FixedFeatureNet()
    assert all(not p.requires_grad for p in a.parameters())
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
    assert not torch.equal(a.weights[0], FixedFeatureNet(seed=1).weights[0])
    taps = a(torch.zeros(2, 3, 64, 48))
    assert [t.shape[1:] for t in taps] == [(16, 32, 24), (32, 16, 12), (32, 8, 6)]
    assert a.embed(torch.zeros(2, 3, 64, 48)).shape == (2, 32)


def test_identical_inputs_have_zero_losses(net64, rng):
    a = _t(rng.uniform(-1, 1, size=(2, 3, 16, 12)))
    assert perceptual_loss(net64, a, a).item() == 0.0
    assert style_loss(net64, a, a).item() == 0.0


def test_gram_invariant_to_pixel_permutation(rng):
    feat = _t(rng.normal(size=(2, 4, 5, 6)))
    perm = torch.from_numpy(rng.permutation(30))
    shuffled = feat.reshape(2, 4, 30)[..., perm].reshape(2, 4, 5, 6)
    assert torch.allclose(gram(feat), gram(shuffled), atol=1e-14)


def test_gram_matches_loop(rng):
    feat = rng.normal(size=(3, 8, 8))
    np.testing.assert_allclose(gram(_t(feat)[None])[0].numpy(), oracles.gram(feat), atol=1e-6)


def test_style_matches_gram_difference_oracle(net64, rng):
    a, b = rng.uniform(-1, 1, size=(2, 3, 8, 8))
    taps_a, taps_b = net64(_t(a)[None]), net64(_t(b)[None])
    want = np.mean([((oracles.gram(fa[0].numpy()) - oracles.gram(fb[0].numpy())) ** 2).sum()
                    for fa, fb in zip(taps_a, taps_b)])
    assert style_loss(net64, _t(a)[None], _t(b)[None]).item() == pytest.approx(want, rel=1e-9, abs=1e-12)


def test_perceptual_is_mean_tap_l1(net64, rng):
    a, b = _t(rng.uniform(-1, 1, size=(1, 3, 8, 8))), _t(rng.uniform(-1, 1, size=(1, 3, 8, 8)))
    want = np.mean([(fa - fb).abs().mean().item() for fa, fb in zip(net64(a), net64(b))])
    assert perceptual_loss(net64, a, b).item() == pytest.approx(want, rel=1e-12)


# --- composite ------------------------------------------------------------------------------

def test_default_weights():
    w = LossWeights()
    assert (w.l1, w.prec, w.style, w.owl) == (1.0, 1.0, 100.0, 1.0)
    assert LossWeights.from_config(RunConfig(lambda_owl=3.0)).owl == 3.0
    with pytest.raises(ValueError):
        LossWeights(style=-1.0)


def test_perfect_prediction_has_zero_loss(net64):
    s = make_sample(occluder=ArmBar((8, 30), (38, 36), 2.0))
    person, gt = _t(s.person)[None], _t(s.gt_warp)[None]
    total, terms = stage1_loss(_output(gt.clone(), person.clone()), person, gt, net64)
    assert total.item() == 0.0
    assert all(v == 0.0 for v in terms.values())


def test_weights_combine_linearly(net64, rng):
    s = make_sample()
    person, gt = _t(s.person)[None], _t(s.gt_warp)[None]
    out = _output(_t(rng.uniform(-1, 1, size=gt.shape)), _t(rng.uniform(-1, 1, size=gt.shape)))
    total, base = stage1_loss(out, person, gt, net64, LossWeights(1, 1, 100, 1))
    _, doubled = stage1_loss(out, person, gt, net64, LossWeights(1, 1, 100, 2))
    assert doubled["owl"] == pytest.approx(2 * base["owl"], rel=1e-14)
    for key in ("l1", "perc", "style"):
        assert doubled[key] == base[key]
    assert total.item() == pytest.approx(base["l1"] + base["perc"] + base["style"] + base["owl"], rel=1e-14)
    unit = stage1_loss(out, person, gt, net64, LossWeights(1, 1, 1, 1))[1]
    assert base["style"] == pytest.approx(100 * unit["style"], rel=1e-14)


def test_loss_gradients(net64, rng):
    gt = _t(rng.uniform(-1, 1, size=(1, 3, 8, 8)))
    gt[..., 2:4, 3:6] = 0.0
    person = _t(rng.uniform(-1, 1, size=(1, 3, 8, 8)))
    warp_g = _t(rng.uniform(-1, 1, size=(1, 3, 8, 8))).requires_grad_()
    tryon = _t(rng.uniform(-1, 1, size=(1, 3, 8, 8))).requires_grad_()
    assert grad_check(lambda: owl_loss(gt, warp_g), warp_g) < 1e-4
    assert grad_check(lambda: perceptual_loss(net64, tryon, person), tryon) < 1e-4
    assert grad_check(lambda: style_loss(net64, tryon, person), tryon) < 1e-4
    assert grad_check(lambda: stage1_loss(_output(warp_g, tryon), person, gt, net64)[0],
                      [warp_g, tryon], n_samples=80) < 1e-4
