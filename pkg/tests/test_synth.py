import numpy as np
import pytest
import torch

from vtryon.synth import (COLORS, VOCAB, Affine, ArmBar, Bend, GeneratorSpec, garment_alpha, generate_dataset,
                          load_dataset, load_sample_dir, make_sample, read_png, save_dataset,
                          save_sample_dir, silhouette, tokenize, verify_sample, write_png)
from vtryon.warp import backward_warp


def _glyph_centroid_x(img, color):
    sel = np.all(np.isclose(img, np.array(color)[:, None, None]), axis=0)
    return np.nonzero(sel)[1].mean()


def test_identity_affine_sample():
    s = make_sample(deformation=Affine())
    np.testing.assert_array_equal(s.gt_flow, 0.0)
    np.testing.assert_array_equal(s.gt_warp, s.garment * s.occlusion_mask)
    assert verify_sample(s)


def test_translation_shifts_glyphs_by_four_pixels():
    s = make_sample(texture="glyphs", color="blue", color2="yellow", deformation=Affine(offset=(4.0, 0.0)))
    np.testing.assert_array_equal(s.gt_flow[0], 4.0)
    np.testing.assert_array_equal(s.gt_flow[1], 0.0)
    before = _glyph_centroid_x(s.garment, COLORS["yellow"])
    after = _glyph_centroid_x(s.gt_warp, COLORS["yellow"])
    # backward sampling at x + 4 moves content 4 px to the left
    assert after - before == pytest.approx(-4.0, abs=1e-12)


def test_arm_bar_burns_holes_exactly_on_the_bar():
    bar = ArmBar((8.0, 40.0), (40.0, 34.0), 3.0)
    s = make_sample(occluder=bar)
    on_bar = bar.mask(64, 48)
    alpha = garment_alpha(64, 48, "short")
    assert 0.13 < (on_bar & alpha).sum() / alpha.sum() < 0.17
    np.testing.assert_array_equal(s.occlusion_mask[0] == 0, on_bar)
    assert np.all(s.gt_warp[:, on_bar] == 0.0)
    assert verify_sample(s)


def test_bend_flow_is_horizontal():
    s = make_sample(deformation=Bend(amplitude=2.5, period=40.0, phase=0.3))
    np.testing.assert_array_equal(s.gt_flow[1], 0.0)
    assert np.abs(s.gt_flow[0]).max() <= 2.5
    assert verify_sample(s)


def test_forward_points_invert_backward_map():
    for deformation in (Affine(((1.02, 0.05), (-0.03, 0.97)), (1.5, -2.0)), Bend(2.0, 50.0, 1.0)):
        pts = np.array([[10.0, 20.0], [30.0, 41.0], [23.5, 31.5]])
        moved = deformation.forward_points(pts, 64, 48)
        flow = torch.from_numpy(deformation.flow(64, 48))
        # the backward map evaluated at the moved points returns the originals
        for (x, y), (mx, my) in zip(pts, moved):
            ix, iy = int(round(mx)), int(round(my))
            if abs(mx - ix) < 1e-9 and abs(my - iy) < 1e-9:
                assert (ix + flow[0, iy, ix], iy + flow[1, iy, ix]) == pytest.approx((x, y))
        if isinstance(deformation, Affine):
            cx, cy = 23.5, 31.5
            (a, b), (c, d) = deformation.matrix
            back = np.stack([cx + a * (moved[:, 0] - cx) + b * (moved[:, 1] - cy) + deformation.offset[0],
                             cy + c * (moved[:, 0] - cx) + d * (moved[:, 1] - cy) + deformation.offset[1]], 1)
            np.testing.assert_allclose(back, pts, atol=1e-9)


def test_verify_sample_detects_flipped_mask_pixel():
    s = make_sample(deformation=Affine(offset=(1.0, 2.0)))
    assert verify_sample(s)
    ys, xs = np.nonzero(s.gt_warp.any(axis=0))
    s.occlusion_mask[0, ys[0], xs[0]] = 0.0
    assert not verify_sample(s)


def test_sample_invariants():
    s = make_sample(texture="checker", sleeve="long", occluder=ArmBar((10, 30), (38, 35), 2.0))
    for name in ("garment", "pose", "agnostic", "gt_warp", "person"):
        arr = getattr(s, name)
        assert arr.shape == (3, 64, 48)
        assert arr.min() >= -1 and arr.max() <= 1
    for name in ("occlusion_mask", "coarse_body_mask"):
        assert set(np.unique(getattr(s, name))) <= {0.0, 1.0}
    assert s.caption == "red checked long-sleeve top"


def test_caption_tokens_are_in_vocabulary():
    for s in generate_dataset(GeneratorSpec(n_train=20, n_val=1, n_test=1), seed=3):
        assert all(t in VOCAB for t in tokenize(s.caption))
        assert len(tokenize(s.caption)) == 4  # colour, texture, sleeve style, "top"


def test_hundred_samples_verify():
    samples = generate_dataset(GeneratorSpec(n_train=100, n_val=1, n_test=1), seed=0)
    assert all(verify_sample(s) for s in samples[:100])


def test_generation_deterministic():
    spec = GeneratorSpec(n_train=6, n_val=2, n_test=2)
    a, b = generate_dataset(spec, 11), generate_dataset(spec, 11)
    for s, t in zip(a, b):
        for name in ("garment", "pose", "agnostic", "gt_warp", "gt_flow", "person"):
            np.testing.assert_array_equal(getattr(s, name), getattr(t, name))
        assert s.caption == t.caption
    c = generate_dataset(spec, 12)
    assert any(not np.array_equal(s.garment, t.garment) for s, t in zip(a, c))


def test_splits_are_disjoint():
    samples = generate_dataset(GeneratorSpec(n_train=40, n_val=10, n_test=10), seed=0)
    by_split = {}
    for s in samples:
        by_split.setdefault(s.meta["split"], []).append(s.person.tobytes() + s.garment.tobytes())
    assert {k: len(v) for k, v in by_split.items()} == {"train": 40, "val": 10, "test": 10}
    seen = [set(v) for v in by_split.values()]
    assert not (seen[0] & seen[1]) and not (seen[0] & seen[2]) and not (seen[1] & seen[2])


def test_flow_bound_enforced():
    spec = GeneratorSpec(n_train=30, n_val=1, n_test=1)
    for s in generate_dataset(spec, 1):
        assert np.abs(s.gt_flow).max() <= spec.height / 4
    with pytest.raises(ValueError, match="H/4"):
        GeneratorSpec(max_shift=20.0)
    with pytest.raises(ValueError):
        GeneratorSpec(n_train=0)
    with pytest.raises(ValueError):
        GeneratorSpec(deformations=("twist",))


def test_silhouette_matches_coarse_mask():
    s = make_sample()
    np.testing.assert_array_equal(silhouette(s.person).astype(float), s.coarse_body_mask)
    t = silhouette(torch.from_numpy(s.person))
    assert t.shape == (1, 64, 48) and t.dtype == torch.bool


def test_agnostic_hides_garment_region():
    s = make_sample(texture="stripes", color="green", color2="pink")
    warped_alpha = backward_warp(torch.from_numpy(garment_alpha(64, 48, "short")[None] * 1.0),
                                 torch.from_numpy(s.gt_flow))[0].numpy() > 0.5
    assert np.all(s.agnostic[:, warped_alpha] == 0.0)
    assert np.all(s.person[:, warped_alpha] == s.gt_warp[:, warped_alpha])


def test_png_roundtrip_within_quantisation(tmp_path, rng):
    img = rng.uniform(-1, 1, size=(3, 8, 6))
    write_png(tmp_path / "a.png", img)
    assert np.abs(read_png(tmp_path / "a.png") - img).max() <= 1 / 127.5 / 2 + 1e-12
    mask = (rng.uniform(size=(1, 8, 6)) > 0.5).astype(float)
    write_png(tmp_path / "m.png", mask)
    np.testing.assert_array_equal(read_png(tmp_path / "m.png"), mask)


def test_dataset_directory_roundtrip(tmp_path):
    samples = generate_dataset(GeneratorSpec(n_train=3, n_val=1, n_test=2), seed=4)
    save_dataset(samples, tmp_path / "d", header={"seed": 4})
    back = load_dataset(tmp_path / "d")
    assert len(back) == 6
    for s, t in zip(samples, back):
        for name in ("garment", "pose", "agnostic", "gt_warp", "gt_flow", "person",
                     "occlusion_mask", "coarse_body_mask"):
            np.testing.assert_array_equal(getattr(s, name), getattr(t, name))
        assert t.caption == s.caption
        assert verify_sample(t)
    assert len(load_dataset(tmp_path / "d", "test")) == 2
    index = (tmp_path / "d" / "index.txt").read_text()
    assert "# seed=4" in index


def test_missing_sample_dir(tmp_path):
    with pytest.raises(FileNotFoundError, match="meta.txt"):
        load_sample_dir(tmp_path)
    save_sample_dir(make_sample(), tmp_path / "one")
    assert (tmp_path / "one" / "garment.png").is_file()
    assert load_sample_dir(tmp_path / "one").caption == "red striped short-sleeve top"
