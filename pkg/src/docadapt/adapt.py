"""Orchestration: source training and the dual-teacher self-training adaptation loop.

``train_source`` fits the detector on labeled pages with the plain detection
losses.  ``adapt`` then consumes only a source checkpoint plus *unlabeled*
target images: per sample it builds weak/strong views, runs both teachers on
the weak view, fuses their detections into pseudo-labels, trains the student
on the strong view with the six-term weighted objective, and advances the
EMA schedule.  Teacher updates happen on the fixed cadence (dynamic every
``n_update`` iterations, static at epoch end).

Source-freeness and label-freeness are structural: the loop receives an
annotation-stripped view of the target dataset, so held-out labels can only
ever reach the separate evaluator.  Every random choice derives from the
config seed, making full runs reproducible bit-exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import consensus as consensus_mod
from . import detector as det
from . import ema
from . import losses as losses_mod
from . import pngio
from .augment import AugmentConfig, make_views
from .consensus import ConsensusConfig
from .detector import Checkpoint, DetectorConfig, load_checkpoint, save_checkpoint
from .errors import ConfigurationError, NumericError
from .evaluation import EvalResult, map50
from .labelspace import Dataset
from .losses import LossWeights

SELECTION_MODES = ("consensus", "hard", "none")


@dataclass(frozen=True)
class OptimizerConfig:
    """Plain SGD with momentum; one multiplicative decay partway through.

    The default step size suits the self-training loop, where the student
    must move slowly relative to pseudo-label noise; from-scratch source
    training wants something hotter (3e-3 works well).
    """

    learning_rate: float = 5e-4
    momentum: float = 0.9
    decay_factor: float = 0.1
    decay_at_fraction: float = 2.0 / 3.0

    def lr_for_epoch(self, epoch: int, total_epochs: int) -> float:
        if total_epochs > 1 and epoch >= self.decay_at_fraction * total_epochs:
            return self.learning_rate * self.decay_factor
        return self.learning_rate


class SGDMomentum:
    def __init__(self, params: det.ModelParameters, momentum: float):
        self.momentum = momentum
        self.velocity = {n: np.zeros_like(a) for n, a in params.items()}

    def step(self, params: det.ModelParameters, grads: dict, lr: float) -> None:
        for name, g in grads.items():
            v = self.momentum * self.velocity[name] + g
            self.velocity[name] = v
            params[name] = params[name] - lr * v


@dataclass(frozen=True)
class AdaptConfig:
    """Every tunable of the pipeline; defaults are desk-scale, swept by ``ablate``."""

    detector: DetectorConfig = field(default_factory=DetectorConfig)
    schedule: ema.TeacherSchedule = field(default_factory=ema.TeacherSchedule)
    consensus: ConsensusConfig = field(default_factory=ConsensusConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    # Self-training earns its gains early and drifts if run long; four epochs
    # (with the x0.1 step-size decay at two thirds) is the sweet spot at this
    # scale. Supervised source training typically wants more (8 works well).
    epochs: int = 4
    eval_every: int = 1
    seed: int = 0
    selection_mode: str = "consensus"
    hard_threshold: float = 0.8
    use_kl: bool = True
    use_auxiliary: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be at least 1")
        if self.eval_every < 1:
            raise ConfigurationError("eval_every must be at least 1")
        if self.selection_mode not in SELECTION_MODES:
            raise ConfigurationError(f"selection_mode must be one of {SELECTION_MODES}")
        if not (0.0 < self.hard_threshold < 1.0):
            raise ConfigurationError("hard_threshold must lie in (0, 1)")


@dataclass
class EpochRecord:
    epoch: int
    losses: dict
    pseudo_count_mean: float
    pseudo_consensus_fraction: float
    pseudo_score_mean: float
    map50: float | None = None
    per_category_ap: dict = field(default_factory=dict)


@dataclass
class RunReport:
    """Per-epoch metrics; serialized as metrics.json plus a flat metrics.csv."""

    records: list = field(default_factory=list)
    final_map50: float | None = None
    checkpoint_path: str | None = None

    def to_jsonable(self) -> dict:
        return {
            "epochs": [
                {
                    "epoch": r.epoch,
                    "losses": {k: float(v) for k, v in sorted(r.losses.items())},
                    "pseudo_count_mean": float(r.pseudo_count_mean),
                    "pseudo_consensus_fraction": float(r.pseudo_consensus_fraction),
                    "pseudo_score_mean": float(r.pseudo_score_mean),
                    "map50": None if r.map50 is None else float(r.map50),
                    "per_category_ap": {k: float(v) for k, v in sorted(r.per_category_ap.items())},
                }
                for r in self.records
            ],
            "final_map50": None if self.final_map50 is None else float(self.final_map50),
            "checkpoint_path": self.checkpoint_path,
        }

    def save(self, out_dir) -> None:
        import json

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.json").write_text(
            json.dumps(self.to_jsonable(), sort_keys=True, indent=1)
        )
        rows = ["epoch,term,value"]
        for r in self.records:
            for term, value in sorted(r.losses.items()):
                rows.append(f"{r.epoch},loss_{term},{value!r}")
            rows.append(f"{r.epoch},pseudo_count_mean,{r.pseudo_count_mean!r}")
            rows.append(f"{r.epoch},pseudo_consensus_fraction,{r.pseudo_consensus_fraction!r}")
            rows.append(f"{r.epoch},pseudo_score_mean,{r.pseudo_score_mean!r}")
            if r.map50 is not None:
                rows.append(f"{r.epoch},map50,{r.map50!r}")
            for cat, ap in sorted(r.per_category_ap.items()):
                rows.append(f"{r.epoch},ap_{cat},{ap!r}")
        (out_dir / "metrics.csv").write_text("\n".join(rows) + "\n")


def _step_seed(seed: int, epoch: int, position: int) -> int:
    # Stable per-step stream: distinct for every (run seed, epoch, sample).
    return (seed * 1_000_003 + epoch * 9_973 + position * 7 + 1) % (2**31 - 1)


def _load_images(dataset: Dataset) -> dict:
    return {im.id: pngio.load_gray(im.file_path) for im in dataset.images}


def evaluate_model(params, config: DetectorConfig, dataset: Dataset) -> EvalResult:
    """Score a parameter set on a labeled dataset (mAP@0.5)."""
    preds = []
    for im in dataset.images:
        image = pngio.load_gray(im.file_path)
        preds.append(det.infer(params, image, config, image_id=im.id).detections)
    return map50(preds, dataset.annotations, dataset.taxonomy)


def train_source(dataset: Dataset, config: AdaptConfig, eval_dataset: Dataset | None = None):
    """Supervised source training (detection losses only); returns (Checkpoint, RunReport)."""
    if len(dataset) == 0:
        raise ConfigurationError("cannot train on an empty dataset")
    if len(dataset.taxonomy) != config.detector.num_categories:
        raise ConfigurationError(
            f"dataset has {len(dataset.taxonomy)} categories but the detector is "
            f"configured for {config.detector.num_categories}"
        )
    dcfg = config.detector
    params = det.init_params(dcfg, config.seed)
    optimizer = SGDMomentum(params, config.optimizer.momentum)
    images = _load_images(dataset)
    targets = {im.id: dataset.annotations_for(im.id) for im in dataset.images}
    ids = [im.id for im in dataset.images]
    shuffle_rng = np.random.Generator(np.random.PCG64(config.seed))
    report = RunReport()
    iteration = 0
    for epoch in range(config.epochs):
        lr = config.optimizer.lr_for_epoch(epoch, config.epochs)
        order = shuffle_rng.permutation(len(ids))
        sums: dict = {}
        for pos, idx in enumerate(order):
            image_id = ids[idx]
            out = det.train_step(
                params, images[image_id], targets[image_id], dcfg,
                seed=_step_seed(config.seed, epoch, pos),
            )
            total = out.detection_loss().item()
            if not np.isfinite(total):
                raise NumericError(f"non-finite detection loss on image {image_id}")
            optimizer.step(params, out.gradients, lr)
            iteration += 1
            for k, v in out.loss_values().items():
                sums[k] = sums.get(k, 0.0) + v
            sums["total"] = sums.get("total", 0.0) + total
        record = EpochRecord(
            epoch=epoch,
            losses={k: v / len(ids) for k, v in sums.items()},
            pseudo_count_mean=0.0,
            pseudo_consensus_fraction=0.0,
            pseudo_score_mean=0.0,
        )
        if eval_dataset is not None and ((epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1):
            result = evaluate_model(params, dcfg, eval_dataset)
            record.map50 = result.map50
            record.per_category_ap = dict(result.per_category_ap)
            report.final_map50 = result.map50
        report.records.append(record)
    ckpt = Checkpoint(params=params, config=dcfg, taxonomy=dataset.taxonomy, iteration=iteration, epoch=config.epochs)
    return ckpt, report


def _resolve_checkpoint(source_ckpt) -> Checkpoint:
    if isinstance(source_ckpt, Checkpoint):
        return source_ckpt
    return load_checkpoint(source_ckpt)


# Config fields that define the parameter shapes; these must match the
# checkpoint exactly (thresholds and the like may be overridden freely).
_ARCH_FIELDS = ("input_size", "num_categories", "channels", "anchors", "roi_pool")


def _check_architecture(ckpt: Checkpoint, detector_config: DetectorConfig) -> None:
    for name in _ARCH_FIELDS:
        have = getattr(ckpt.config, name)
        want = getattr(detector_config, name)
        if have != want:
            raise ConfigurationError(
                f"checkpoint architecture mismatch on {name!r}: checkpoint has "
                f"{have}, configured {want}"
            )


def select_pseudo_labels(r_static, r_dynamic, config: AdaptConfig) -> consensus_mod.PseudoLabelSet:
    if config.selection_mode == "hard":
        return consensus_mod.hard_select(
            r_dynamic, config.hard_threshold, config.consensus.nms_iou,
            ignore_floor=config.consensus.ignore_floor,
        )
    return consensus_mod.fuse(r_static, r_dynamic, config.consensus)


def adapt(source_ckpt, target_images: Dataset, config: AdaptConfig, eval_dataset: Dataset | None = None):
    """Full self-training adaptation; returns (Checkpoint, RunReport).

    ``target_images`` may carry annotations, but the loop only ever sees an
    annotation-stripped view of it; ``eval_dataset`` labels are read solely
    by the per-epoch evaluator.
    """
    ckpt = _resolve_checkpoint(source_ckpt)
    if config.selection_mode == "none":
        raise ConfigurationError("adapt requires selection_mode 'consensus' or 'hard'")
    if target_images.taxonomy.categories != ckpt.taxonomy.categories:
        raise ConfigurationError(
            f"target taxonomy {target_images.taxonomy.categories} does not match "
            f"checkpoint taxonomy {ckpt.taxonomy.categories}"
        )
    if len(ckpt.taxonomy) != config.detector.num_categories:
        raise ConfigurationError("checkpoint taxonomy size does not match configured detector")
    _check_architecture(ckpt, config.detector)
    target_view = target_images.images_only()  # structural label-freeness
    if len(target_view) == 0:
        raise ConfigurationError("no target images to adapt on")

    dcfg = config.detector
    n = len(target_view)
    schedule = config.schedule.resolved(n)
    state = ema.init_dual_state(ckpt.params)
    optimizer = SGDMomentum(state.student_params, config.optimizer.momentum)
    images = _load_images(target_view)
    ids = [im.id for im in target_view.images]
    shuffle_rng = np.random.Generator(np.random.PCG64(config.seed + 17))
    k = dcfg.num_categories
    report = RunReport()

    for epoch in range(config.epochs):
        lr = config.optimizer.lr_for_epoch(epoch, config.epochs)
        order = shuffle_rng.permutation(n)
        sums: dict = {}
        pseudo_counts = []
        pseudo_fracs = []
        pseudo_scores = []
        for pos, idx in enumerate(order):
            image_id = ids[idx]
            seed = _step_seed(config.seed, epoch, pos)
            views = make_views(images[image_id], seed, config.augment)

            ctx_static = det.forward_context(state.static_params, views.weak, dcfg)
            r_static = det.detect_in_context(ctx_static, image_id).detections
            ctx_dynamic = det.forward_context(state.dynamic_params, views.weak, dcfg)
            res_dynamic = det.detect_in_context(ctx_dynamic, image_id)
            r_dynamic = res_dynamic.detections

            pseudo = select_pseudo_labels(r_static, r_dynamic, config)
            step = det.train_forward(state.student_params, views.strong, pseudo, dcfg, seed=seed)

            rpn_term = step.loss_rpn_cls + step.loss_rpn_reg
            roi_term = step.loss_roi_cls + step.loss_roi_reg
            kl_term = 0.0
            if config.use_kl and len(step.matched_target_indices):
                pseudo_soft = pseudo.detections.soft_labels_array(k)[step.matched_target_indices]
                kl_term = losses_mod.soft_kl_distill(
                    step.soft_outputs, pseudo_soft, direction=config.weights.kl_direction
                )
            fdis_term = 0.0
            ent_term = 0.0
            cont_term = 0.0
            if config.use_auxiliary:
                fdis_term = losses_mod.feature_distill(ctx_dynamic.pooled, step.features.pooled)
                if len(step.matched_target_indices):
                    ent_term = losses_mod.entropy_loss(step.soft_outputs)
                if len(pseudo) >= 2:
                    teacher_regions = det.region_features(ctx_dynamic, pseudo.boxes_array())
                    cont_term = losses_mod.contrastive_loss(
                        teacher_regions, step.features.regions, config.weights.temperature
                    )
            factor = losses_mod.weight_factor(
                r_dynamic.soft_labels_array(k), len(pseudo), config.weights
            )
            try:
                breakdown = losses_mod.total(
                    rpn_term, roi_term, kl_term, fdis_term, ent_term, cont_term,
                    factor, config.weights,
                )
            except NumericError as exc:
                raise NumericError(f"image {image_id}: {exc}") from exc

            grads = step.backward(breakdown.total_tensor)
            optimizer.step(state.student_params, grads, lr)
            state = ema.tick(state, schedule, epoch_ended=(pos == n - 1))

            for term, value in breakdown.terms().items():
                sums[term] = sums.get(term, 0.0) + value
            sums["factor"] = sums.get("factor", 0.0) + breakdown.factor
            sums["total"] = sums.get("total", 0.0) + breakdown.total
            pseudo_counts.append(len(pseudo))
            pseudo_fracs.append(pseudo.consensus_fraction())
            if len(pseudo):
                pseudo_scores.append(float(pseudo.detections.scores_array().mean()))

        record = EpochRecord(
            epoch=epoch,
            losses={key: v / n for key, v in sums.items()},
            pseudo_count_mean=float(np.mean(pseudo_counts)),
            pseudo_consensus_fraction=float(np.mean(pseudo_fracs)),
            pseudo_score_mean=float(np.mean(pseudo_scores)) if pseudo_scores else 0.0,
        )
        if eval_dataset is not None and ((epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1):
            result = evaluate_model(state.student_params, dcfg, eval_dataset)
            record.map50 = result.map50
            record.per_category_ap = dict(result.per_category_ap)
            report.final_map50 = result.map50
        report.records.append(record)

    final = Checkpoint(
        params=state.student_params,
        config=dcfg,
        taxonomy=ckpt.taxonomy,
        iteration=state.iteration,
        epoch=state.epoch,
    )
    return final, report


# -- ablation harness ----------------------------------------------------------


@dataclass(frozen=True)
class AblationRow:
    name: str
    selection_mode: str  # "none" (source only), "hard", or "consensus"
    use_kl: bool
    use_auxiliary: bool

    def switches(self) -> tuple:
        return (self.selection_mode, self.use_kl, self.use_auxiliary)


def table_grid() -> tuple:
    """The canonical six-row switch matrix, from source-only to the full method."""
    return (
        AblationRow("source_only", "none", False, False),
        AblationRow("hard", "hard", False, False),
        AblationRow("hard+kl", "hard", True, False),
        AblationRow("consensus", "consensus", False, False),
        AblationRow("consensus+kl", "consensus", True, False),
        AblationRow("consensus+kl+aux", "consensus", True, True),
    )


@dataclass
class AblationResult:
    rows: list  # (AblationRow, map50, RunReport | None)

    def to_text(self) -> str:
        header = f"{'configuration':<20} {'hard':>5} {'dynamic':>8} {'kl':>5} {'aux':>5} {'mAP50':>8}"
        lines = [header, "-" * len(header)]
        for row, score, _ in self.rows:
            lines.append(
                f"{row.name:<20} "
                f"{'yes' if row.selection_mode == 'hard' else 'no':>5} "
                f"{'yes' if row.selection_mode == 'consensus' else 'no':>8} "
                f"{'yes' if row.use_kl else 'no':>5} "
                f"{'yes' if row.use_auxiliary else 'no':>5} "
                f"{score:>8.4f}"
            )
        return "\n".join(lines)

    def to_csv(self) -> str:
        rows = ["name,hard_selection,dynamic_selection,kl_distillation,auxiliary_losses,map50"]
        for row, score, _ in self.rows:
            rows.append(
                f"{row.name},{int(row.selection_mode == 'hard')},{int(row.selection_mode == 'consensus')},"
                f"{int(row.use_kl)},{int(row.use_auxiliary)},{score!r}"
            )
        return "\n".join(rows) + "\n"


def ablate(source_ckpt, target_images: Dataset, base_config: AdaptConfig, grid, eval_dataset: Dataset) -> AblationResult:
    """Run every switch combination in ``grid`` with a shared seed; one mAP per row.

    Duplicate switch combinations are dropped with a warning.  The
    ``source_only`` row evaluates the unadapted checkpoint directly.
    """
    ckpt = _resolve_checkpoint(source_ckpt)
    seen = set()
    rows = []
    for row in grid:
        key = row.switches()
        if key in seen:
            warnings.warn(f"ablation grid row {row.name!r} duplicates an earlier row; skipping")
            continue
        seen.add(key)
        if row.selection_mode == "none":
            score = evaluate_model(ckpt.params, base_config.detector, eval_dataset).map50
            rows.append((row, score, None))
            continue
        config = replace(
            base_config,
            selection_mode=row.selection_mode,
            use_kl=row.use_kl,
            use_auxiliary=row.use_auxiliary,
        )
        _, report = adapt(ckpt, target_images, config, eval_dataset=eval_dataset)
        rows.append((row, report.final_map50, report))
    return AblationResult(rows)
