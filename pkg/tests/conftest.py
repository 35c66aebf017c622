import numpy as np
import pytest

from artifact.fanbeam import build_geometry
from artifact.phantoms import CorpusConfig, make_corpus
from artifact.tensor import set_deterministic


ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance(request):
    """``acceptance(n, ok, detail)`` records one PASS/FAIL line and fails the test when not ok."""

    def report(n: int, ok: bool, detail: str):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
        request.config.stash[ACCEPTANCE_LINES].append(line)
        print(line)
        assert ok, line

    def skip(n: int, reason: str):
        line = f"criterion {n}: SKIP - {reason}"
        request.config.stash[ACCEPTANCE_LINES].append(line)
        print(line)
        pytest.skip(reason)

    report.skip = skip
    return report


@pytest.fixture(autouse=True)
def _deterministic():
    set_deterministic(True)
    yield
    set_deterministic(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def geom16():
    return build_geometry({"grid_n": 16})


@pytest.fixture(scope="session")
def corpus16(tmp_path_factory, geom16):
    """Small 16^3 corpus shared by the training, evaluation and cli tests."""
    root = tmp_path_factory.mktemp("corpus16")
    cfg = CorpusConfig(grid_n=16, recon_train=4, recon_test=2, seg_train=4, seg_test=2)
    return make_corpus(cfg, geom16, root)


TOY_NETS = {
    "generator": {"encoder_channels": [4, 8, 8], "bottleneck_channels": 8, "decoder_channels": [8, 8, 4]},
    "discriminator": {"channels": [4, 4, 4]},
    "segnet": {"channels": [2, 3, 4]},
}


def toy_config(**extra):
    """8^3 configuration with small networks; the learning rate is raised so
    that a 50-step smoke run makes visible progress."""
    from artifact.training import RunConfig

    raw = {"epochs": 1, "batch_size": 2, "lr_gan": 1e-3, "deterministic": True, "geometry": {"grid_n": 8}}
    raw.update({k: dict(v) for k, v in TOY_NETS.items()})
    raw.update(extra)
    return RunConfig(raw)


@pytest.fixture(scope="session")
def toy_geometry():
    return build_geometry({"grid_n": 8})


def make_toy_samples(geometry, n=4):
    """Phantoms generated at 16^3 and averaged down to 8^3, with 8-grid projections."""
    from artifact.fanbeam import build_projector
    from artifact.phantoms import TrainingSample, generate_phantom, hu_normalize, simulate_projection_pair

    proj = build_projector(geometry)
    out = []
    for s in range(n):
        v, m = generate_phantom(s, 16)
        y = hu_normalize(v).reshape(8, 2, 8, 2, 8, 2).mean(axis=(1, 3, 5))
        xa, xl = simulate_projection_pair(y, proj)
        out.append(TrainingSample(f"toy-{s}", s, xa, xl, y, m.data[::2, ::2, ::2].copy()))
    return out


@pytest.fixture(scope="session")
def toy_samples(toy_geometry):
    return make_toy_samples(toy_geometry)


@pytest.fixture
def toy_seg():
    from artifact.networks import SegNet, SegNetConfig

    return SegNet(SegNetConfig(channels=(2, 3, 4))).freeze()
