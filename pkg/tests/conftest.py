import time
import warnings

import numpy as np
import pytest

from complexity_align.datamodel import load_manifest, make_split
from complexity_align.encoders import EncoderConfig, init_prompt_bank, init_toy_params
from complexity_align.synthetic import VARIANT_B, generate_fixture

ACCEPTANCE_LINES: list[str] = []
# wall-clock seconds of the expensive session fixtures
TIMINGS: dict[str, float] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    """The 512-image procedural dataset used by the end-to-end checks."""
    root = tmp_path_factory.mktemp("fixture_a")
    t0 = time.perf_counter()
    generate_fixture(root, n=512, seed=0)
    TIMINGS["generate"] = time.perf_counter() - t0
    return root


@pytest.fixture(scope="session")
def fixture_b_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("fixture_b")
    generate_fixture(root, n=256, seed=1, params=VARIANT_B, name="synthb")
    return root


@pytest.fixture(scope="session")
def fixture_manifest(fixture_dir):
    return load_manifest(fixture_dir / "manifest.tsv")


@pytest.fixture(scope="session")
def fixture_split(fixture_manifest):
    return make_split(fixture_manifest, seed=0, ratio=0.8)


@pytest.fixture(scope="session")
def small_dir(tmp_path_factory):
    """A 40-image dataset for quick pipeline tests."""
    root = tmp_path_factory.mktemp("small")
    generate_fixture(root, n=40, seed=3, name="small")
    return root


@pytest.fixture(scope="session")
def trained_default(fixture_dir, fixture_manifest, fixture_split):
    """Default dual-branch desk run on the fixture, shared across modules."""
    from complexity_align.experiments import apply_branch
    from complexity_align.pipeline import desk_config, prepare_manifest, train

    cfg = apply_branch(desk_config(), "C+A")
    t0 = time.perf_counter()
    manifest = prepare_manifest(fixture_manifest, fixture_dir / "scenes.tsv", cfg)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        result = train(cfg, manifest, fixture_split, measure_loss=True)
    TIMINGS["train"] = time.perf_counter() - t0
    return result, manifest


@pytest.fixture
def toy_config():
    return EncoderConfig()


@pytest.fixture
def tiny_config():
    return EncoderConfig(depth=1, patch_count=4, patch_dim=8, token_dim=8, max_text_len=16, shared_dim=6,
                         input_side=8, vocab_buckets=64)


@pytest.fixture
def toy_model(toy_config):
    return init_toy_params(toy_config, seed=0)


@pytest.fixture
def toy_bank(toy_config):
    return init_prompt_bank(toy_config, 5, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
