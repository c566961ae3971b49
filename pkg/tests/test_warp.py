import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vtryon import oracles
from vtryon.runtime import grad_check
from vtryon.warp import average_flow, backward_warp, flow_to_color, load_flow, save_flow, upsample_flow


def _t(a):
    return torch.from_numpy(np.asarray(a, dtype=np.float64))


def test_zero_flow_is_identity(rng):
    src = _t(rng.normal(size=(3, 7, 5)))
    assert torch.equal(backward_warp(src, torch.zeros(2, 7, 5, dtype=torch.float64)), src)


def test_unit_flow_shifts_left_and_duplicates_border():
    pattern = _t(np.arange(20).reshape(1, 4, 5))
    flow = torch.zeros(2, 4, 5, dtype=torch.float64)
    flow[0] = 1.0
    out = backward_warp(pattern, flow)[0].numpy()
    want = np.empty((4, 5))
    for y in range(4):
        for x in range(5):
            want[y, x] = pattern[0, y, min(x + 1, 4)]
    np.testing.assert_array_equal(out, want)


def test_half_pixel_flow_interpolates():
    src = _t([[[0.0, 1.0]]])
    flow = torch.zeros(2, 1, 2, dtype=torch.float64)
    flow[0] = 0.5
    assert backward_warp(src, flow)[0, 0, 0].item() == 0.5


def test_warp_matches_loop_oracle_on_sixteen_cases():
    for seed in range(16):
        rng = np.random.default_rng(seed)
        img = rng.normal(size=(2, 5, 5))
        flow = rng.uniform(-3, 3, size=(2, 5, 5))
        got = backward_warp(_t(img), _t(flow)).numpy()
        np.testing.assert_array_equal(got, oracles.bilinear_warp(img, flow))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 4, 6), elements=st.floats(-5, 5)),
       st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2 ** 31))
def test_warp_linear_in_source(flow, a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = _t(rng.normal(size=(3, 4, 6))), _t(rng.normal(size=(3, 4, 6)))
    f = _t(flow)
    lhs = backward_warp(a * x + b * y, f)
    rhs = a * backward_warp(x, f) + b * backward_warp(y, f)
    assert torch.allclose(lhs, rhs, atol=1e-6)


def test_warp_batched_equals_unbatched(rng):
    src = _t(rng.normal(size=(3, 2, 6, 4)))
    flow = _t(rng.uniform(-2, 2, size=(3, 2, 6, 4)))
    batched = backward_warp(src, flow)
    for i in range(3):
        assert torch.equal(batched[i], backward_warp(src[i], flow[i]))


def test_warp_shape_errors():
    with pytest.raises(ValueError):
        backward_warp(torch.zeros(3, 4, 4), torch.zeros(2, 4, 5))
    with pytest.raises(ValueError):
        backward_warp(torch.zeros(3, 4, 4), torch.zeros(3, 4, 4))


def test_warp_gradients(rng):
    src = _t(rng.normal(size=(1, 2, 5, 6))).requires_grad_()
    flow = _t(rng.uniform(-1.8, 1.8, size=(1, 2, 5, 6))).requires_grad_()
    weights = _t(rng.normal(size=(1, 2, 5, 6)))
    assert grad_check(lambda: (backward_warp(src, flow) * weights).sum(), [src, flow], n_samples=120) < 1e-4


def test_average_flow_examples():
    same = torch.tensor([2.0, -1.0]).view(1, 2, 1, 1).repeat(6, 1, 3, 3)
    assert torch.equal(average_flow(same), same[0])
    pixel = torch.tensor([[1, 0], [3, 0], [2, 2], [2, -2], [0, 1], [4, -1]], dtype=torch.float64)
    assert average_flow(pixel.view(6, 2, 1, 1)).flatten().tolist() == [2.0, 0.0]
    assert torch.count_nonzero(average_flow(torch.zeros(6, 2, 4, 4))) == 0


def test_average_flow_rejects_empty():
    with pytest.raises(ValueError, match="at least one"):
        average_flow(torch.zeros(0, 2, 3, 3))


def test_upsample_flow():
    const = torch.zeros(2, 8, 6, dtype=torch.float64)
    const[0] = 1.0
    up = upsample_flow(const, 64, 48)
    assert up.shape == (2, 64, 48)
    assert torch.allclose(up[0], torch.full((64, 48), 8.0, dtype=torch.float64), rtol=0, atol=1e-12)
    assert torch.count_nonzero(up[1]) == 0
    assert torch.count_nonzero(upsample_flow(torch.zeros(2, 3, 3), 12)) == 0


def test_upsample_linear_ramp():
    ramp = torch.zeros(2, 3, 3, dtype=torch.float64)
    ramp[0] = torch.arange(3, dtype=torch.float64).view(1, 3)
    up = upsample_flow(ramp, 6, 6)
    # corner-aligned: source column j lands at 5 * j / 2, values doubled
    want = 2 * torch.linspace(0, 2, 6, dtype=torch.float64)
    for row in up[0]:
        assert torch.allclose(row, want, atol=1e-12)


def test_upsample_rejects_fractional_factor():
    with pytest.raises(ValueError, match="non-integer"):
        upsample_flow(torch.zeros(2, 8, 6), 60, 45)


def test_flow_file_roundtrip(tmp_path, rng):
    flow = _t(rng.normal(size=(2, 5, 4)))
    save_flow(tmp_path / "f.raw", flow)
    assert torch.equal(load_flow(tmp_path / "f.raw"), flow)


def test_flow_to_color_range():
    flow = torch.randn(2, 6, 5)
    rgb = flow_to_color(flow)
    assert rgb.shape == (3, 6, 5)
    assert rgb.min() >= 0 and rgb.max() <= 1
    assert torch.equal(flow_to_color(torch.zeros(2, 2, 2)), torch.ones(3, 2, 2, dtype=torch.float64))
