import numpy as np
import pytest

from docadapt import detector as det
from docadapt import synthdocs as sd
from docadapt.errors import CheckpointError, ContractViolationError
from docadapt.geometry import Box
from docadapt.labelspace import Taxonomy, shared4_taxonomy

# A shrunken configuration keeps unit tests fast; the acceptance suite runs
# the full-size one.
SMALL = det.DetectorConfig(
    input_size=160,
    channels=(8, 16, 32),
    anchors=((32, 10), (68, 12), (68, 24), (68, 42), (68, 64), (136, 20), (136, 44), (136, 68)),
    rpn_batch=64,
    roi_batch=48,
    roi_pos_fraction=0.5,
)

# 2-category, 8x8-input micro-instantiation for finite-difference checks.
MICRO = det.DetectorConfig(
    input_size=8,
    num_categories=2,
    channels=(2, 3, 4),
    anchors=((5, 4), (7, 7)),
    rpn_batch=4,
    rpn_pos_iou=0.4,
    pre_nms_top=4,
    post_nms_top=3,
    roi_batch=6,
    roi_pool=2,
    proposal_min_size=1.0,
    dtype="float64",
)


def small_page(seed=3):
    spec = sd.DomainSpec(name="small", page_size=160, elements_per_page=(4, 7),
                         full_width_fraction=0.1)
    return sd.generate_page(spec, seed)


@pytest.fixture(scope="module")
def small_params():
    return det.init_params(SMALL, seed=0)


class TestInfer:
    def test_deterministic(self, small_params):
        page = small_page()
        a = det.infer(small_params, page.image, SMALL)
        b = det.infer(small_params, page.image, SMALL)
        assert len(a.detections) == len(b.detections)
        assert np.array_equal(a.detections.boxes_array(), b.detections.boxes_array())
        assert np.array_equal(a.detections.scores_array(), b.detections.scores_array())
        assert np.array_equal(a.features.pooled, b.features.pooled)

    def test_untrained_model_on_blank_page_is_quiet(self):
        params = det.init_params(SMALL, seed=7)
        blank = np.ones((160, 160), dtype=np.float32)
        res = det.infer(params, blank, SMALL)
        assert len(res.detections) <= SMALL.max_detections
        assert all(d.score < 0.9 for d in res.detections)

    def test_soft_labels_normalized_and_sorted(self, small_params):
        res = det.infer(small_params, small_page().image, SMALL)
        scores = [d.score for d in res.detections]
        assert scores == sorted(scores, reverse=True)
        for d in res.detections:
            assert d.soft_label.sum() == pytest.approx(1.0, abs=1e-5)
            assert d.category == int(np.argmax(d.soft_label))

    def test_features_align_with_detections(self, small_params):
        res = det.infer(small_params, small_page().image, SMALL)
        assert res.features.regions.shape == (len(res.detections), SMALL.feature_dim)
        assert res.features.pooled.shape == (SMALL.feature_dim,)

    def test_wrong_size_rejected(self, small_params):
        with pytest.raises(ContractViolationError):
            det.infer(small_params, np.ones((100, 100)), SMALL)


class TestTrainStep:
    def test_empty_targets_finite(self, small_params):
        params = small_params.clone()
        out = det.train_step(params, small_page().image, [], SMALL, seed=0)
        vals = out.loss_values()
        assert all(np.isfinite(v) for v in vals.values())
        assert vals["rpn_reg"] == 0.0 and vals["roi_reg"] == 0.0
        assert out.soft_outputs.shape == (0, 4)

    def test_sampling_deterministic_given_seed(self, small_params):
        page = small_page()
        a = det.train_forward(small_params, page.image, page.annotations, SMALL, seed=5)
        b = det.train_forward(small_params, page.image, page.annotations, SMALL, seed=5)
        assert np.array_equal(a.rois, b.rois)
        assert a.detection_loss().item() == b.detection_loss().item()

    def test_soft_output_rows_normalized(self, small_params):
        page = small_page()
        out = det.train_forward(small_params, page.image, page.annotations, SMALL, seed=1)
        if len(out.soft_outputs.data):
            assert np.allclose(out.soft_outputs.data.sum(axis=1), 1.0, atol=1e-5)
        assert out.features.regions.shape[0] == out.target_count

    def test_gradients_cover_all_parameters(self, small_params):
        page = small_page()
        out = det.train_step(small_params.clone(), page.image, page.annotations, SMALL, seed=2)
        assert set(out.gradients) == set(small_params.names())
        total_norm = sum(float(np.abs(g).sum()) for g in out.gradients.values())
        assert total_norm > 0


class TestOverfitOneSample:
    def test_loss_halves_in_200_steps(self):
        page = small_page(seed=11)
        params = det.init_params(SMALL, seed=0)
        velocity = {n: np.zeros_like(a) for n, a in params.items()}
        first = last = None
        for step in range(200):
            out = det.train_step(params, page.image, page.annotations, SMALL, seed=step)
            last = out.detection_loss().item()
            if first is None:
                first = last
            for n, g in out.gradients.items():
                velocity[n] = 0.9 * velocity[n] + g
                params[n] = params[n] - 3e-3 * velocity[n]
        assert last <= 0.5 * first

    def test_own_predictions_beat_shuffled_categories(self):
        # after overfitting, supervising with the model's own confident
        # detections gives lower roi_cls than category-shuffled ones
        page = small_page(seed=11)
        params = det.init_params(SMALL, seed=0)
        velocity = {n: np.zeros_like(a) for n, a in params.items()}
        for step in range(150):
            out = det.train_step(params, page.image, page.annotations, SMALL, seed=step)
            for n, g in out.gradients.items():
                velocity[n] = 0.9 * velocity[n] + g
                params[n] = params[n] - 3e-3 * velocity[n]
        res = det.infer(params, page.image, SMALL)
        confident = [d for d in res.detections if d.score >= 0.5]
        assert confident, "overfit model should be confident on its own page"
        own = [(d.box, d.category) for d in confident]
        shuffled = [(b, (c + 1) % 4) for b, c in own]
        loss_own = det.train_forward(params, page.image, own, SMALL, seed=999).loss_roi_cls.item()
        loss_shuf = det.train_forward(params, page.image, shuffled, SMALL, seed=999).loss_roi_cls.item()
        assert loss_own < loss_shuf


class TestMicroGradients:
    """Finite differences against the full step graph on a tiny instantiation."""

    def setup_case(self):
        rng = np.random.default_rng(0)
        params = det.init_params(MICRO, seed=1)
        # He-init activations decay to ~1e-6 on an 8x8 toy, which would put
        # ReLU kinks inside the FD epsilon; resample weights at a healthy scale.
        prng = np.random.default_rng(5)
        for name in params.names():
            params[name] = prng.normal(0.0, 0.35, params[name].shape)
        image = rng.random((8, 8))
        targets = [(Box(1.0, 2.0, 6.5, 6.0), 0), (Box(0.5, 0.5, 7.5, 7.5), 1)]
        frozen = np.array(
            [[0.8, 1.8, 6.8, 6.2], [0.2, 0.4, 7.7, 7.6], [2.0, 0.0, 7.0, 4.0]]
        )
        return params, image, targets, frozen

    def component(self, params, image, targets, frozen, name):
        out = det.train_forward(params, image, targets, MICRO, seed=3, frozen_rois=frozen)
        comp = {
            "rpn_cls": out.loss_rpn_cls,
            "rpn_reg": out.loss_rpn_reg,
            "roi_cls": out.loss_roi_cls,
            "roi_reg": out.loss_roi_reg,
        }[name]
        return out, comp

    @pytest.mark.parametrize("name", ["rpn_cls", "rpn_reg", "roi_cls", "roi_reg"])
    def test_component_gradients_match_fd(self, name):
        params, image, targets, frozen = self.setup_case()
        out, comp = self.component(params, image, targets, frozen, name)
        assert comp.item() > 0, f"{name} must be exercised by the micro case"
        grads = out.backward(comp)
        rng = np.random.default_rng(42)
        names = sorted(params.names())
        checked = 0
        eps = 1e-5
        while checked < 20:
            pname = names[int(rng.integers(len(names)))]
            arr = params[pname]
            flat_idx = int(rng.integers(arr.size))
            orig = arr.reshape(-1)[flat_idx]

            def value_at(v):
                trial = params.clone()
                a = trial[pname].copy()
                a.reshape(-1)[flat_idx] = v
                trial[pname] = a
                _, c = self.component(trial, image, targets, frozen, name)
                return c.item()

            fd = (value_at(orig + eps) - value_at(orig - eps)) / (2 * eps)
            an = grads[pname].reshape(-1)[flat_idx]
            assert an == pytest.approx(fd, rel=1e-3, abs=1e-7), f"{name}/{pname}[{flat_idx}]"
            checked += 1


class TestCheckpoints:
    def make_ckpt(self, params):
        return det.Checkpoint(
            params=params, config=SMALL, taxonomy=shared4_taxonomy(), iteration=12, epoch=3
        )

    def test_clone_independent(self, small_params):
        clone = det.clone_params(small_params)
        clone["roi.fc.b"] = clone["roi.fc.b"] + 1.0
        assert not np.array_equal(clone["roi.fc.b"], small_params["roi.fc.b"])

    def test_round_trip_bit_exact(self, tmp_path, small_params):
        path = tmp_path / "model.ckpt"
        det.save_checkpoint(self.make_ckpt(small_params), path)
        loaded = det.load_checkpoint(path)
        assert loaded.params.equal(small_params)
        assert loaded.iteration == 12 and loaded.epoch == 3
        assert loaded.taxonomy.categories == shared4_taxonomy().categories
        assert loaded.config == SMALL
        again = tmp_path / "model2.ckpt"
        det.save_checkpoint(loaded, again)
        assert path.read_bytes() == again.read_bytes()

    def test_truncated_file_rejected(self, tmp_path, small_params):
        path = tmp_path / "model.ckpt"
        det.save_checkpoint(self.make_ckpt(small_params), path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 257])
        with pytest.raises(CheckpointError, match="truncated"):
            det.load_checkpoint(path)

    def test_foreign_file_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint at all, sorry")
        with pytest.raises(CheckpointError):
            det.load_checkpoint(path)

    def test_parameter_name_set_fixed(self, small_params):
        clone = small_params.clone()
        with pytest.raises(KeyError):
            clone["new.param"] = np.zeros(3)
        with pytest.raises(ContractViolationError):
            clone["roi.fc.b"] = np.zeros(999)
