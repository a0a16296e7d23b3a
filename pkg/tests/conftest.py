import numpy as np
import pytest

from saidnerf.encodings import FrequencyConfig, HashGridConfig, ShConfig
from saidnerf.field import FieldConfig, MlpSpec, init_params
from saidnerf.scenegen import default_scene, generate_dataset


@pytest.fixture
def tiny_cfg():
    return FieldConfig(
        hash_grid=HashGridConfig(levels=2, features_per_level=2, table_size_log2=10, base_resolution=2,
                                 growth_factor=1.5),
        frequency=FrequencyConfig(num_bands=2),
        sh=ShConfig(degree=2),
        pos_enc_mlp=MlpSpec(1, 8),
        density_mlp=MlpSpec(2, 8),
        geo_features=4,
        seg_mlp=MlpSpec(2, 8),
        color_mlp=MlpSpec(1, 8),
        semantic_channels=2,
    )


@pytest.fixture
def tiny_params(tiny_cfg):
    params = init_params(tiny_cfg, seed=3)
    # larger table entries than the default init so hash gradients are not vanishingly small
    rng = np.random.default_rng(11)
    table = params.view("hash.table")
    table[...] = rng.uniform(-0.5, 0.5, size=table.shape)
    return params


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("scene16")
    return generate_dataset(default_scene(width=16, height=16, views=4), 4, seed=0, root=root, test_every=4)


def unit_dirs(rng, n):
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def report(request, capsys):
    """Record one PASS/FAIL line for an acceptance criterion and assert it."""

    def _report(number: int, ok: bool, detail: str):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}; {detail}"
        request.config.stash[ACCEPTANCE_KEY].append(line)
        with capsys.disabled():
            print(f"\n{line}")
        assert ok, line

    return _report
