import numpy as np
import pytest
import torch

from vtryon.runtime import RunConfig, grad_check
from vtryon.stage1 import RefineNet, Stage1Model, TrainingDiverged, build_stage1, stage1_batch, train_stage1
from vtryon.synth import GeneratorSpec, generate_dataset

TINY = RunConfig(lr=2e-3, batch_size=2, max_steps=4, graph_nodes=8)


@pytest.fixture(scope="module")
def few_samples():
    return generate_dataset(GeneratorSpec(n_train=4, n_val=1, n_test=1), seed=7)[:4]


def test_refine_net_starts_neutral(rng):
    net = RefineNet(8).double()
    feat = torch.from_numpy(rng.normal(size=(2, 8, 4, 3)))
    off_s, off_r, att = net(feat, feat.flip(0))
    assert torch.count_nonzero(off_s) == 0 and torch.count_nonzero(off_r) == 0
    assert torch.all(att == 0.5)
    assert net.convs[-1].out_channels == 5
    with pytest.raises(ValueError):
        net(feat, feat[..., :2])


def test_refine_net_gradients(rng):
    torch.manual_seed(0)
    net = RefineNet(4, hidden=8).double()
    torch.nn.init.normal_(net.convs[-1].weight, std=0.1)
    a = torch.from_numpy(rng.normal(size=(1, 4, 4, 3)))
    b = torch.from_numpy(rng.normal(size=(1, 4, 4, 3)))

    def f():
        off_s, off_r, att = net(a, b)
        return (off_s ** 2).sum() + off_r.sum() + (att * a[:, :1]).sum()
    assert grad_check(f, list(net.parameters()), n_samples=60) < 1e-4


def test_stage1_output_geometry_and_range(few_samples):
    torch.manual_seed(0)
    model = Stage1Model(nodes=8)
    b = stage1_batch(few_samples[:2])
    with torch.no_grad():
        out = model(b["garment"], b["pose"], b["agnostic"])
    for img in (out.warp_g, out.tryon_c):
        assert img.shape == (2, 3, 64, 48)
        assert img.min() >= -1 and img.max() <= 1
    assert out.source_flow.shape == out.reference_flow.shape == (2, 2, 64, 48)
    assert out.refine_attention.shape == (2, 1, 64, 48)
    with pytest.raises(ValueError, match="64x48"):
        model(b["garment"][..., :32, :], b["pose"], b["agnostic"])
    with pytest.raises(ValueError, match="divisible"):
        Stage1Model(60, 48)


def test_full_attention_routes_only_the_garment(few_samples):
    torch.manual_seed(0)
    model = Stage1Model(nodes=8).double()
    with torch.no_grad():
        model.refine.convs[-1].bias[4] = 60.0  # sigmoid saturates to exactly 1
    b = stage1_batch(few_samples[:1], torch.float64)
    with torch.no_grad():
        out = model(b["garment"], b["pose"], b["agnostic"])
    # with att = 1 the reference branch is multiplied by zero and refine_1x1 starts as identity
    assert torch.equal(out.tryon_c, out.warp_g)


def test_training_is_deterministic(few_samples):
    _, a = train_stage1(few_samples, TINY)
    _, b = train_stage1(few_samples, TINY)
    assert a == b
    assert len(a) == 4
    assert set(a[0]) == {"l1", "perc", "style", "owl", "total"}


def test_training_logs_epoch_summaries(few_samples):
    seen = []
    train_stage1(few_samples, RunConfig(lr=1e-3, batch_size=2, epochs=2, graph_nodes=8), log_fn=seen.append)
    assert [s["epoch"] for s in seen] == [1, 2]
    assert all(np.isfinite(s["total"]) for s in seen)


def test_non_finite_loss_aborts(few_samples):
    model = build_stage1(TINY)
    with torch.no_grad():
        model.decoder.head.bias.fill_(float("nan"))
    with pytest.raises(TrainingDiverged, match="batch 0"):
        train_stage1(few_samples, TINY, model=model)


def test_unverified_sample_rejected(few_samples):
    broken = generate_dataset(GeneratorSpec(n_train=1, n_val=1, n_test=1), seed=7)[0]
    broken.occlusion_mask[0, 32, 24] = 1 - broken.occlusion_mask[0, 32, 24]
    broken.gt_warp[:, 32, 24] = 0.5
    with pytest.raises(ValueError, match="verification"):
        train_stage1([broken], TINY)
