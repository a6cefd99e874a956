"""Walk through any-shot transfer on one synthetic world.

Trains the weak detector and base heads, shows how much each transfer term
adds for the novel classes, then fine-tunes with a few shots.

    python3 demos/transfer_walkthrough.py [seed]
"""

import sys

import numpy as np

from anyshot.experiments import evaluate_variants, full_options, mean_similarity, train_base
from anyshot.evaluation import evaluate_model
from anyshot.synthworld import WorldConfig, generate_dataset, novel_parents, sample_kshot
from anyshot.training import TrainConfig, fine_tune

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
ds = generate_dataset(WorldConfig(seed=seed))
print(f"world: {len(ds.train)} train / {len(ds.test)} test images, base {ds.split.base}, novel {ds.split.novel}")

cfg = TrainConfig(seed=seed)
model, trace = train_base(ds, cfg)
print(f"base training: loss {trace[0].total:.3f} -> {trace[-1].total:.3f} over {len(trace)} iterations")

# Novel classes never had a box or mask during base training.
print("\nnovel AP50 / mask AP50 per transfer variant (zero-shot):")
for name, rep in evaluate_variants(model, ds.test).items():
    print(f"  {name:16s} {100 * rep.aggregate('novel', 'AP50'):5.1f}  {100 * rep.aggregate('novel', 'maskAP50'):5.1f}")

# Each novel class is derived from one base class; the averaged similarity should find it.
S = mean_similarity(model, ds.test)
parents = novel_parents(ds.split.num_classes, ds.split.num_base)
print("\nmean S(z) over test proposals (rows: novel, cols: base)")
with np.printoptions(precision=2, suppress=True):
    print(S)
for n, p in parents.items():
    guess = ds.split.base[int(np.argmax(S[n - ds.split.num_base]))]
    print(f"  {ds.split.classes[n]}: derived from {ds.split.classes[p]}, most similar base class {guess}")

# Single seeds are noisy; the acceptance suite compares medians over five.
print("\nfew-shot fine-tuning of the direct heads:")
for k in (0, 5, 10):
    m = model.copy()
    if k:
        m, _ = fine_tune(m, sample_kshot(ds.train, ds.split, k, seed), TrainConfig(seed=seed, k=k))
    rep = evaluate_model(m, ds.test, "all", options=full_options(k > 0))
    print(f"  k={k:2d}: novel AP50 {100 * rep.aggregate('novel', 'AP50'):5.1f}, "
          f"base AP50 {100 * rep.aggregate('base', 'AP50'):5.1f}")
