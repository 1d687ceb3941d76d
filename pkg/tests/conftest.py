"""Session-scoped experiment fixtures shared by the acceptance suite.

The expensive artifacts (rendered benchmark datasets, the three source
detectors, the three adaptation runs) are built once per session and reused
by every criterion that needs them.
"""

import numpy as np
import pytest

from docadapt import adapt as ad
from docadapt import detector as det
from docadapt import synthdocs as sd

ACCEPT_SEEDS = (0, 1, 2)

# Benchmark sizing: 200 source training pages, 50-page held-out splits,
# 120 unlabeled target pages.
N_SRC_TRAIN, N_SRC_EVAL = 200, 50
N_TGT_TRAIN, N_TGT_EVAL = 120, 50


def source_train_config(seed: int) -> ad.AdaptConfig:
    # From-scratch supervised training wants a hotter step size than the
    # adaptation loop's default.
    return ad.AdaptConfig(
        epochs=8,
        seed=seed,
        optimizer=ad.OptimizerConfig(learning_rate=3e-3),
    )


def adapt_config(seed: int) -> ad.AdaptConfig:
    # Library defaults: 4 epochs, lr 5e-4, consensus keep floor 0.8.
    return ad.AdaptConfig(seed=seed)


@pytest.fixture(scope="session")
def bench(tmp_path_factory):
    """The four benchmark datasets (source/target x train/eval)."""
    root = tmp_path_factory.mktemp("bench")
    src_spec, tgt_spec = sd.domain_presets()
    return {
        "src_train": sd.generate_dataset(src_spec, N_SRC_TRAIN, 100, root / "src_train"),
        "src_eval": sd.generate_dataset(src_spec, N_SRC_EVAL, 9000, root / "src_eval"),
        "tgt_train": sd.generate_dataset(tgt_spec, N_TGT_TRAIN, 5000, root / "tgt_train"),
        "tgt_eval": sd.generate_dataset(tgt_spec, N_TGT_EVAL, 7000, root / "tgt_eval"),
    }


@pytest.fixture(scope="session")
def source_runs(bench):
    """seed -> (checkpoint, held-out source mAP), trained at the acceptance scale."""
    runs = {}
    for seed in ACCEPT_SEEDS:
        ckpt, report = ad.train_source(bench["src_train"], source_train_config(seed), bench["src_eval"])
        runs[seed] = (ckpt, report.final_map50)
    return runs


@pytest.fixture(scope="session")
def target_zero_shot(bench, source_runs):
    """seed -> source-only target mAP (the domain gap baseline)."""
    out = {}
    for seed, (ckpt, _) in source_runs.items():
        out[seed] = ad.evaluate_model(ckpt.params, ckpt.config, bench["tgt_eval"]).map50
    return out


@pytest.fixture(scope="session")
def adapted_runs(bench, source_runs):
    """seed -> adapted target mAP after the full self-training loop."""
    out = {}
    for seed, (ckpt, _) in source_runs.items():
        _, report = ad.adapt(
            ckpt, bench["tgt_train"].images_only(), adapt_config(seed), eval_dataset=bench["tgt_eval"]
        )
        out[seed] = report.final_map50
    return out


def median(values) -> float:
    return float(np.median(list(values)))
