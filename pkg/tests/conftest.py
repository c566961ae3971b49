import os

import numpy as np
import pytest
import torch

from vtryon.diffusion import Stage2Model, build_stage2, prepare_stage2_inputs, pretrain_autoencoder, train_stage2
from vtryon.runtime import RunConfig
from vtryon.stage1 import train_stage1
from vtryon.synth import Affine, GeneratorSpec, generate_dataset, make_sample

torch.set_num_threads(int(os.environ.get("VTRYON_TEST_THREADS", "1")))

# Stage-1 schedule used by the learnability checks: a short warmup, cosine decay
# and gradient clipping make 200 steps at a desk learning rate stable.
ACCEPTANCE_STAGE1 = RunConfig(lr=2e-3, warmup_steps=30, lr_decay="cosine", lambda_owl=5.0,
                              grad_clip=1.0, max_steps=200)
ACCEPTANCE_STAGE2 = RunConfig(lr=1e-3, warmup_steps=10, lr_decay="cosine", grad_clip=1.0,
                              max_steps=200, ae_pretrain_steps=300)

TINY_PIPELINE_CONFIG = "max_steps=3\nae_pretrain_steps=3\nsampling_steps=5\nlr=1e-3\n"

CRITERIA = {
    1: "oracle equivalence",
    2: "identities at initialization",
    3: "occlusion-aware loss contract",
    4: "gradient suite",
    5: "frozen-weight contract",
    6: "warping-stage learnability",
    7: "diffusion sanity",
    8: "metric self-consistency",
    9: "end-to-end determinism",
}
_outcomes: dict[int, list[bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion the test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number = marker.args[0]
    if report.when == "call" or (report.when == "setup" and not report.passed):
        # an expected failure still counts as a failed criterion
        _outcomes.setdefault(number, []).append(report.passed and not hasattr(report, "wasxfail"))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number, title in CRITERIA.items():
        results = _outcomes.get(number)
        if results is None:
            continue
        status = "PASS" if all(results) else "FAIL"
        terminalreporter.write_line(f"{status} criterion {number}: {title} "
                                    f"({sum(results)}/{len(results)} checks)")


def run_tiny_pipeline(root, seed=0, count=8):
    """generate-data -> train-warp -> train-diffusion -> eval under ``root``; returns the exit codes."""
    from vtryon.cli import run

    root.mkdir(parents=True, exist_ok=True)
    (root / "tiny.cfg").write_text(TINY_PIPELINE_CONFIG)
    common = ["--seed", str(seed)]
    data, ckpt = str(root / "data"), root / "ckpt"
    return [
        run(["generate-data", "--count", str(count), "--out", data] + common),
        run(["train-warp", "--data-dir", data, "--config", str(root / "tiny.cfg"), "--out", str(ckpt)] + common),
        run(["train-diffusion", "--data-dir", data, "--stage1-ckpt", str(ckpt / "stage1.ckpt"),
             "--config", str(root / "tiny.cfg"), "--out", str(ckpt)] + common),
        run(["eval", "--data-dir", data, "--stage1-ckpt", str(ckpt / "stage1.ckpt"),
             "--stage2-ckpt", str(ckpt / "stage2.ckpt"), "--out", str(root / "eval")] + common),
    ]


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def affine_dataset():
    """64 training samples with affine warps plus held-out val/test samples."""
    spec = GeneratorSpec(deformations=("affine",), n_train=64, n_val=8, n_test=16)
    samples = generate_dataset(spec, seed=0)
    return ([s for s in samples if s.meta["split"] == "train"],
            [s for s in samples if s.meta["split"] == "test"])


@pytest.fixture(scope="session")
def trained_stage1(affine_dataset):
    train, _ = affine_dataset
    model, curve = train_stage1(train, ACCEPTANCE_STAGE1)
    return model, curve


@pytest.fixture(scope="session")
def autoencoder(affine_dataset):
    train, _ = affine_dataset
    ae, curve = pretrain_autoencoder(train, ACCEPTANCE_STAGE2)
    return ae, curve


@pytest.fixture(scope="session")
def stage2_inputs(affine_dataset, trained_stage1, autoencoder):
    train, _ = affine_dataset
    return prepare_stage2_inputs(train, trained_stage1[0], autoencoder[0])


@pytest.fixture(scope="session")
def trained_stage2(autoencoder, stage2_inputs):
    """``(model before training, model after, eps-MSE curve)``."""
    untouched = build_stage2(ACCEPTANCE_STAGE2, autoencoder[0])
    model = build_stage2(ACCEPTANCE_STAGE2, autoencoder[0])
    model, curve = train_stage2(stage2_inputs, ACCEPTANCE_STAGE2, model)
    return untouched, model, curve


@pytest.fixture
def translation_sample():
    s = make_sample(64, 48, "stripes", "red", "blue", "short", Affine(offset=(3.0, -2.0)))
    s.meta.update(split="train", name="translation")
    return s


@pytest.fixture
def small_stage2():
    torch.manual_seed(0)
    return Stage2Model(32, 24).double()
