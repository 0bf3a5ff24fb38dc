import numpy as np
import pytest
from hypothesis import settings

from giram.backbone import BackboneConfig
from giram.ingest import GridSpec, prepare
from giram.keyenc import CoordStats, KeyEncoder
from giram.synth import SynthSpec, category_map, generate

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


TINY_SPEC = SynthSpec(n_users=24, n_pois=40, n_blocks=6, events_per_block=12, neighborhood=10,
                      n_trending=5, seed=3)


@pytest.fixture(scope="session")
def tiny_world():
    spec = TINY_SPEC
    checkins = generate(spec)
    vocab, base, blocks = prepare(checkins, n_blocks=5, min_count=5, cmap=category_map(spec))
    grid = GridSpec.covering(checkins, 20, 20)
    encoder = KeyEncoder(vocab, grid, CoordStats.fit(base.checkins))
    return {"spec": spec, "checkins": checkins, "vocab": vocab, "base": base,
            "blocks": blocks, "grid": grid, "encoder": encoder}


@pytest.fixture
def fast_backbone():
    return BackboneConfig(poi_dim=8, user_dim=4, hidden=12, epochs=2, finetune_epochs=2, batch_size=16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_RUN = {
    "synth": {"n_users": 24, "n_pois": 40, "events_per_block": 12, "neighborhood": 10, "n_trending": 5, "seed": 3},
    "data": {"min_count": 5, "grid_rows": 20, "grid_cols": 20},
    "backbone": {"poi_dim": 8, "user_dim": 4, "hidden": 12, "epochs": 2, "finetune_epochs": 2, "batch_size": 16},
    "keygen": {"epochs": 1},
}


def tiny_run_config(tmp_path, methods, **extra):
    from giram.config import ExperimentConfig
    raw = {**TINY_RUN, "methods": list(methods), "output_dir": str(tmp_path), **extra}
    return ExperimentConfig.from_dict(raw)
