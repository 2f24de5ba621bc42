"""How the penalty norm and its weight shape the learned change.

Tunes one base model on a batch of 32 bias-contradicting samples with each
norm at three weights and prints the test balanced-accuracy change and the
fraction of entries of the change that are exactly zero.
"""

# %%
import numpy as np

from deltatune import BiasSpec, PenaltyConfig, TuneConfig, default_spec, generate, pretrain, select_contradicting, tune
from deltatune.harness import evaluate
from deltatune.metrics import norm_report
from deltatune.network import combined_forward, forward

bundle = generate(BiasSpec("OneSidedPatch", seed=0))
spec = default_spec()
base = pretrain(spec, bundle.train.x, bundle.train.y, seed=0)
batch = select_contradicting(spec, base, bundle.tune_pool, bundle.contradicting, count=32)[:2]
bacc0 = evaluate(lambda xb: forward(spec, base, xb).data, bundle.test.x, bundle.test.y, 2).balanced_accuracy

# %% [markdown]
# The L1 part of the penalty has a kink at zero.  Entries whose update would
# carry them across zero are set to exactly zero instead, so L1 produces
# truly sparse changes while L2 only shrinks them.  With a large L1 weight
# the penalty outweighs every data gradient and the change stays at zero.

# %%
print(f"{'norm':9s} {'lambda':>7s} {'steps':>5s} {'d bacc':>8s} {'zeros':>7s}")
for kind in ("L1", "L2", "Combined"):
    for lam in (0.01, 1.0, 10.0):
        res = tune(base, spec, batch, TuneConfig.change_penalized(PenaltyConfig(kind, lam)))
        bacc = evaluate(lambda xb: combined_forward(res.model, xb).data, bundle.test.x, bundle.test.y,
                        2).balanced_accuracy
        print(f"{kind:9s} {lam:7g} {res.steps_taken:5d} {bacc - bacc0:+8.4f} "
              f"{norm_report(base, res.params).sparsity_frac:7.1%}")
