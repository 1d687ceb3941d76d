"""End-to-end: train on source pages, measure the domain gap, adapt, re-measure.

This is a scaled-down run (fewer pages and epochs than the acceptance
experiment) so it finishes in a couple of minutes on a laptop; expect the
numbers to be rough.  The full-size protocol lives in tests/test_acceptance.py
and behind the `docadapt` command line.
"""

import time
from pathlib import Path

from docadapt import adapt, detector
from docadapt.synthdocs import domain_presets, generate_dataset

out = Path("demo_out/end_to_end")
source_spec, target_spec = domain_presets()

print("rendering datasets...")
src_train = generate_dataset(source_spec, 80, seed=100, out_dir=out / "src_train")
src_eval = generate_dataset(source_spec, 25, seed=9000, out_dir=out / "src_eval")
tgt_train = generate_dataset(target_spec, 60, seed=5000, out_dir=out / "tgt_train")
tgt_eval = generate_dataset(target_spec, 25, seed=7000, out_dir=out / "tgt_eval")

config = adapt.AdaptConfig(
    epochs=6,
    seed=0,
    optimizer=adapt.OptimizerConfig(learning_rate=3e-3),
)

print("training the source detector...")
t0 = time.time()
ckpt, report = adapt.train_source(src_train, config, eval_dataset=src_eval)
print(f"  {time.time() - t0:.0f}s, held-out source mAP@0.5 = {report.final_map50:.3f}")

gap = adapt.evaluate_model(ckpt.params, config.detector, tgt_eval)
print(f"zero-shot target mAP@0.5 = {gap.map50:.3f}  (the domain gap)")

print("adapting on unlabeled target pages...")
adapt_config = adapt.AdaptConfig(seed=0)  # library defaults: consensus selection, 4 epochs
t0 = time.time()
adapted, adapt_report = adapt.adapt(ckpt, tgt_train.images_only(), adapt_config, eval_dataset=tgt_eval)
print(f"  {time.time() - t0:.0f}s")
for rec in adapt_report.records:
    print(
        f"  epoch {rec.epoch}: target mAP={rec.map50:.3f} "
        f"pseudo/page={rec.pseudo_count_mean:.1f} consensus={rec.pseudo_consensus_fraction:.2f}"
    )
print(f"\nsource-only {gap.map50:.3f} -> adapted {adapt_report.final_map50:.3f} "
      f"({(adapt_report.final_map50 - gap.map50) * 100:+.1f} points)")

detector.save_checkpoint(adapted, out / "adapted.ckpt")
print(f"adapted checkpoint written to {out / 'adapted.ckpt'}")
