import os

# cap BLAS threading before numpy loads: timing criteria assume one core
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import pytest

from spotfusion.data import preprocess_expression
from spotfusion.synth import SynthConfig, synth_generate
from spotfusion.training import TrainConfig, train


TINY_SYNTH = dict(n_classes=2, n_spots=120, n_genes=16, n_pathways=4,
                  markers_per_class=4, n_samples=3, split_counts=(1, 1, 1),
                  morph_noise=2.0, marker_boost=4.0, base_rate=1.0, seed=7)


def tiny_train_config(**overrides) -> TrainConfig:
    cfg = TrainConfig(epochs=3, seed=3, learnable_pathways=8)
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


@pytest.fixture(scope="session")
def tiny_raw():
    ds, db, truth = synth_generate(SynthConfig(**TINY_SYNTH))
    return ds, db, truth


@pytest.fixture(scope="session")
def tiny_prep(tiny_raw):
    ds, db, truth = tiny_raw
    return preprocess_expression(ds), db, truth


@pytest.fixture(scope="session")
def trained_tiny(tiny_prep):
    ds, db, truth = tiny_prep
    cfg = tiny_train_config()
    model, history = train(ds, db, cfg)
    return ds, db, cfg, model, history
