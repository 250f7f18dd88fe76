"""
Pretraining a desk-sized model
==============================

Six layers, 8 routed + 2 shared experts, top-2 routing. The corpus is a
synthetic Markov chain of "words", so there is real structure to learn.
A short run (100 steps) keeps this under a minute or so on a laptop.
"""
import numpy as np

from gigamoe.model import ModelConfig, MoETransformer, count_params
from gigamoe.train import MultiStepScheduleSpec, TrainConfig, lr_at, train_loop

# The multi-step schedule: linear warmup, then x0.25 drops at 30/60/90/98%
spec = MultiStepScheduleSpec(warmup_steps=2000, total_steps=100_000, base_lr=1e-4)
for step in (1000, 2000, 30_001, 60_001, 90_001, 98_001):
    print(f"lr at {step:>6}: {lr_at(spec, step):.6g}")

cfg = ModelConfig()
total, active = count_params(cfg)
print(f"\nparameters: {total:,} total, {active:,} active per token")

rng = np.random.default_rng(0)
words = [rng.integers(1, 48, size=rng.integers(2, 6)) for _ in range(60)]
trans = rng.dirichlet(np.ones(60) * 0.1, size=60)
tokens, w = [], 0
while len(tokens) < 50_000:
    tokens.extend(words[w])
    tokens.append(0)
    w = rng.choice(60, p=trans[w])

run = TrainConfig(total_steps=100, warmup_steps=10, batch_size=4, seq_len=32)
model = MoETransformer(cfg, seed=run.seed)
result = train_loop(model, np.array(tokens), run,
                    on_step=lambda t: print(t.line()) if t.step % 20 == 0 else None)
print("\nper-layer H_utilization:", np.round(result.per_layer_h_utilization, 3))
