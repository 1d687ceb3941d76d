import json
import warnings
from dataclasses import replace

import numpy as np
import pytest

from docadapt import adapt as ad
from docadapt import detector as det
from docadapt import synthdocs as sd
from docadapt.errors import ConfigurationError

# Deliberately tiny runs: these tests exercise wiring and determinism, not
# detection quality (the acceptance suite covers that).
SMALL_DET = det.DetectorConfig(
    input_size=160,
    channels=(8, 16, 32),
    anchors=((32, 10), (68, 12), (68, 24), (68, 42), (68, 64), (136, 20), (136, 44), (136, 68)),
)


def small_spec(name="unit-src", **kw):
    defaults = dict(name=name, page_size=160, elements_per_page=(3, 6), full_width_fraction=0.1)
    defaults.update(kw)
    return sd.DomainSpec(**defaults)


@pytest.fixture(scope="module")
def datasets(tmp_path_factory):
    root = tmp_path_factory.mktemp("adapt_data")
    train = sd.generate_dataset(small_spec(), 6, 0, root / "train")
    other = sd.generate_dataset(small_spec(name="unit-tgt", columns=1, margin=14), 5, 50, root / "tgt")
    return train, other


def tiny_config(**kw):
    base = dict(detector=SMALL_DET, epochs=1, seed=3)
    base.update(kw)
    return ad.AdaptConfig(**base)


class TestConfigValidation:
    def test_zero_epochs_rejected(self):
        with pytest.raises(ConfigurationError):
            tiny_config(epochs=0)

    def test_bad_selection_mode(self):
        with pytest.raises(ConfigurationError):
            tiny_config(selection_mode="fancy")

    def test_bad_hard_threshold(self):
        with pytest.raises(ConfigurationError):
            tiny_config(hard_threshold=0.0)


class TestTrainSource:
    def test_empty_dataset_rejected(self, datasets):
        train, _ = datasets
        empty = replace(train, images=(), annotations=())
        with pytest.raises(ConfigurationError):
            ad.train_source(empty, tiny_config())

    def test_taxonomy_size_checked(self, datasets):
        train, _ = datasets
        cfg = tiny_config(detector=replace(SMALL_DET, num_categories=7))
        with pytest.raises(ConfigurationError):
            ad.train_source(train, cfg)

    def test_deterministic_given_seed(self, datasets):
        train, _ = datasets
        cfg = tiny_config()
        ckpt_a, rep_a = ad.train_source(train, cfg)
        ckpt_b, rep_b = ad.train_source(train, cfg)
        assert ckpt_a.params.equal(ckpt_b.params)
        assert rep_a.records[0].losses == rep_b.records[0].losses

    def test_report_and_counters(self, datasets):
        train, _ = datasets
        ckpt, report = ad.train_source(train, tiny_config(epochs=2), eval_dataset=train)
        assert len(report.records) == 2
        assert ckpt.iteration == 2 * len(train)
        assert ckpt.epoch == 2
        assert report.final_map50 is not None

    def test_one_page_fifty_epochs_overfits(self, datasets):
        train, _ = datasets
        one_page = type(train)(
            train.images[:1],
            tuple(a for a in train.annotations if a.image_id == train.images[0].id),
            train.taxonomy,
        )
        cfg = tiny_config(epochs=50, optimizer=ad.OptimizerConfig(learning_rate=5e-3))
        _, report = ad.train_source(one_page, cfg)
        first = report.records[0].losses["total"]
        last = report.records[-1].losses["total"]
        assert last <= 0.5 * first


@pytest.fixture(scope="module")
def source_ckpt(datasets):
    train, _ = datasets
    ckpt, _ = ad.train_source(train, tiny_config(epochs=2))
    return ckpt


class TestAdapt:
    def test_selection_mode_none_rejected(self, datasets, source_ckpt):
        _, tgt = datasets
        with pytest.raises(ConfigurationError):
            ad.adapt(source_ckpt, tgt, tiny_config(selection_mode="none"))

    def test_taxonomy_mismatch_rejected(self, datasets, source_ckpt):
        _, tgt = datasets
        from docadapt.labelspace import Dataset, Taxonomy

        weird = Dataset(tgt.images, (), Taxonomy("x", ("a", "b")))
        with pytest.raises(ConfigurationError):
            ad.adapt(source_ckpt, weird, tiny_config())

    def test_architecture_mismatch_rejected(self, datasets, source_ckpt):
        _, tgt = datasets
        cfg = tiny_config(detector=replace(SMALL_DET, channels=(4, 8, 16)))
        with pytest.raises(ConfigurationError, match="channels"):
            ad.adapt(source_ckpt, tgt, cfg)

    def test_label_freeness_bit_identity(self, datasets, source_ckpt):
        _, tgt = datasets
        cfg = tiny_config(epochs=1, seed=11)
        with_labels, _ = ad.adapt(source_ckpt, tgt, cfg)
        without_labels, _ = ad.adapt(source_ckpt, tgt.images_only(), cfg)
        assert with_labels.params.equal(without_labels.params)

    def test_deterministic_given_seed(self, datasets, source_ckpt):
        _, tgt = datasets
        cfg = tiny_config(epochs=1, seed=5)
        a, _ = ad.adapt(source_ckpt, tgt, cfg)
        b, _ = ad.adapt(source_ckpt, tgt, cfg)
        assert a.params.equal(b.params)

    def test_counters_and_report(self, datasets, source_ckpt):
        _, tgt = datasets
        cfg = tiny_config(epochs=2, seed=5)
        ckpt, report = ad.adapt(source_ckpt, tgt, cfg, eval_dataset=tgt)
        assert ckpt.iteration == 2 * len(tgt)
        assert ckpt.epoch == 2
        assert len(report.records) == 2
        rec = report.records[0]
        assert set(rec.losses) >= {"rpn", "roi", "kl_distill", "feature_distill",
                                   "entropy", "contrastive", "factor", "total"}
        assert rec.pseudo_count_mean >= 0.0
        assert report.final_map50 is not None

    def test_hard_selection_mode_runs(self, datasets, source_ckpt):
        _, tgt = datasets
        cfg = tiny_config(epochs=1, selection_mode="hard", hard_threshold=0.5)
        ckpt, _ = ad.adapt(source_ckpt, tgt, cfg)
        assert not ckpt.params.equal(source_ckpt.params)

    def test_ablation_switches_affect_terms(self, datasets, source_ckpt):
        _, tgt = datasets
        cfg = tiny_config(epochs=1, use_kl=False, use_auxiliary=False)
        _, report = ad.adapt(source_ckpt, tgt, cfg, eval_dataset=None)
        rec = report.records[0]
        assert rec.losses["kl_distill"] == 0.0
        assert rec.losses["feature_distill"] == 0.0
        assert rec.losses["contrastive"] == 0.0


class TestRunReportSerialization:
    def test_files_written_and_stable(self, tmp_path, datasets):
        train, _ = datasets
        _, report = ad.train_source(train, tiny_config(), eval_dataset=train)
        report.save(tmp_path / "a")
        report.save(tmp_path / "b")
        for name in ("metrics.json", "metrics.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        metrics = json.loads((tmp_path / "a" / "metrics.json").read_text())
        assert metrics["epochs"][0]["losses"]["total"] > 0


class TestAblate:
    def test_empty_grid(self, datasets, source_ckpt):
        _, tgt = datasets
        out = ad.ablate(source_ckpt, tgt, tiny_config(), (), eval_dataset=tgt)
        assert out.rows == []

    def test_duplicates_warn_and_skip(self, datasets, source_ckpt):
        _, tgt = datasets
        rows = (
            ad.AblationRow("source_only", "none", False, False),
            ad.AblationRow("source_only_again", "none", False, False),
        )
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            out = ad.ablate(source_ckpt, tgt, tiny_config(), rows, eval_dataset=tgt)
        assert len(out.rows) == 1
        assert any("duplicates" in str(w.message) for w in caught)

    def test_grid_structure(self):
        grid = ad.table_grid()
        assert len(grid) == 6
        assert grid[0].selection_mode == "none"
        assert grid[-1].switches() == ("consensus", True, True)
        # hard/dynamic selection are mutually exclusive per row
        assert all(row.selection_mode in ("none", "hard", "consensus") for row in grid)

    def test_table_render(self, datasets, source_ckpt):
        _, tgt = datasets
        rows = (ad.AblationRow("source_only", "none", False, False),)
        out = ad.ablate(source_ckpt, tgt, tiny_config(), rows, eval_dataset=tgt)
        text = out.to_text()
        assert "source_only" in text and "mAP50" in text
        csv = out.to_csv()
        assert csv.splitlines()[0].startswith("name,hard_selection,dynamic_selection")
