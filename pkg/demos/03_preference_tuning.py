"""
Modified DPO
============

Chosen and rejected log-ratios get separate temperatures, and a length
normalized log-likelihood term on the chosen answer is added.
"""
import math

import numpy as np

from gigamoe.model import MoETransformer, tiny_config
from gigamoe.train import (DPOConfig, TokenizedPreference, TrainConfig, dpo_loss_from_ratios,
                           dpo_train_loop)

cfg = DPOConfig(beta_w=0.2, beta_l=0.1)
print("policy == reference:", dpo_loss_from_ratios([0.0], [0.0], cfg).item(), "ln2 =", math.log(2))
# The trailing chosen log-ratio term is added as written (+r_w); flip it with
# negate_nll_term to get the "negative log-likelihood" reading instead.
flipped = DPOConfig(beta_w=0.2, beta_l=0.1, negate_nll_term=True)
for r_w in (-1.0, 0.0, 1.0, 3.0):
    print(f"r_w={r_w:+.1f}  loss={dpo_loss_from_ratios([r_w], [0.0], cfg).item():+.4f}"
          f"  negated={dpo_loss_from_ratios([r_w], [0.0], flipped).item():+.4f}")

# Tune a tiny model toward one continuation of a fixed prompt
base = MoETransformer(tiny_config(), seed=1)
data = [TokenizedPreference([1, 2, 3], [4, 5], [6, 7]),
        TokenizedPreference([2, 3, 1], [5, 4], [7, 6])]
# Under the typeset sign the loss has no lower bound: lowering the chosen
# log-ratio keeps paying off. The negated term pulls the other way.
for negate in (False, True):
    run = TrainConfig(total_steps=30, warmup_steps=2, schedule="constant", base_lr=5e-3,
                      batch_size=2, checkpoints_per_epoch=1, negate_nll_term=negate)
    policy = MoETransformer(tiny_config(), seed=1)  # starts equal to the reference
    res = dpo_train_loop(policy, base, data, run)
    print(f"\nnegate={negate} loss:", " ".join(f"{x:+.3f}" for x in res.losses[::5]))
