"""The six-term self-training objective and its confidence weighting factor."""

import numpy as np

from docadapt import losses

rng = np.random.default_rng(0)

# soft-label KL distillation: teacher rows are the target distribution
pseudo = np.array([[0.9, 0.05, 0.03, 0.02], [0.1, 0.8, 0.05, 0.05]])
student = np.array([[0.6, 0.2, 0.1, 0.1], [0.2, 0.6, 0.1, 0.1]])
print("kl_distill      :", losses.soft_kl_distill(student, pseudo).item())

# pooled-feature distillation is a plain MSE between image embeddings
t_pool, s_pool = rng.standard_normal(16), rng.standard_normal(16)
print("feature_distill :", losses.feature_distill(t_pool, s_pool).item())

# entropy pushes the student toward confident predictions
print("entropy(uniform):", losses.entropy_loss(np.full((1, 4), 0.25)).item(), "= ln 4")
print("entropy(one-hot):", losses.entropy_loss(np.eye(4)[:1]).item())

# contrastive InfoNCE ties each student region to its teacher counterpart
t_reg = rng.standard_normal((5, 16))
s_reg = t_reg + 0.1 * rng.standard_normal((5, 16))
print("contrastive     :", losses.contrastive_loss(t_reg, s_reg, temperature=0.07).item())

# the factor scales the whole objective up when the dynamic teacher is
# uncertain (entropy) and when many pseudo-labels are present
w = losses.LossWeights()
dyn_soft = np.array([[0.4, 0.3, 0.2, 0.1]])
for count in (0, 5, 20, 1000):
    print(f"factor(count={count:4d}) = {losses.weight_factor(dyn_soft, count, w):.4f}")

breakdown = losses.total(
    rpn=0.8, roi=1.1, kl_distill=0.3, feature_distill_term=0.2,
    entropy=0.9, contrastive=1.5,
    factor=losses.weight_factor(dyn_soft, 5, w), weights=w,
)
print("\nweighted total  :", breakdown.total)
print("per-term values :", breakdown.terms())
