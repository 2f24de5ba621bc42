"""Correcting a biased classifier with one misclassified sample.

Run with ``python demos/01_single_sample_correction.py`` (about a minute on
one core).
"""

# %% [markdown]
# A small conv net is trained on images where a small patch appears on 70% of
# class-0 images and never on class 1.  In the test set both classes carry
# the patch equally often, so the model's balanced accuracy drops.  We then
# pick one patched class-1 image that the model gets wrong and correct the
# model on it.

# %%
import numpy as np

from deltatune import BiasSpec, PenaltyConfig, TuneConfig, default_spec, generate, pretrain, select_contradicting, tune
from deltatune.harness import evaluate
from deltatune.metrics import norm_report
from deltatune.network import forward
from deltatune.tuner import tuned_logits_fn

bundle = generate(BiasSpec("OneSidedPatch", seed=0))
spec = default_spec()
base = pretrain(spec, bundle.train.x, bundle.train.y, seed=0)


def scores(logits_fn):
    rep = evaluate(logits_fn, bundle.test.x, bundle.test.y, spec.num_classes)
    return rep.accuracy, rep.balanced_accuracy


print("holdout (biased) bacc: %.3f" % evaluate(lambda xb: forward(spec, base, xb).data,
                                                bundle.holdout.x, bundle.holdout.y, 2).balanced_accuracy)
before = scores(lambda xb: forward(spec, base, xb).data)
print("test acc %.3f  bacc %.3f" % before)

# %% [markdown]
# ``contradicting`` names the (label, group) pairs that go against the
# training correlation.  ``select_contradicting`` returns disjoint batches of
# such samples that the base model misclassifies.

# %%
x, y, ids = select_contradicting(spec, base, bundle.tune_pool, bundle.contradicting, count=1, draw_index=0)
print("tuning on sample", ids, "label", y)

# %% [markdown]
# Change-penalized tuning keeps ``base`` frozen and trains a change that
# starts at zero.  Tuning stops once the sample is classified correctly.
# Plain fine-tuning is the reference.

# %%
configs = {
    "change-penalized": TuneConfig.change_penalized(PenaltyConfig("Combined", 1.0)),
    "fine-tune": TuneConfig.baseline("FineTune"),
}
for name, cfg in configs.items():
    res = tune(base, spec, (x, y), cfg)
    acc, bacc = scores(tuned_logits_fn(res, spec, base, cfg))
    change = res.params if name == "change-penalized" else {k: res.params[k].data - base[k].data for k in base.names()}
    norms = norm_report(base, change)
    print(f"{name:17s} steps {res.steps_taken:3d}  bacc {before[1]:.3f} -> {bacc:.3f}  "
          f"|change|_1 {norms.delta_l1:.3g}  exact zeros {norms.sparsity_frac:.1%}")
