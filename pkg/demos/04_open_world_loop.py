"""The whole loop, clean and under open-world conditions.

A model pretrained on the first two classes faces four more tasks of two
unseen classes each. Per task it bootstraps an acceptance threshold from its
buffer, filters the stream, grows its output head for newly discovered
classes, then alternates top-scoring acquisitions, memory-score buffer
updates, and buffer-only training until the pool is empty.

The ablations drop one mechanism each; the mixed stream interleaves 25%
corrupted and 25% foreign batches to show why the filter earns its keep.

Run:  python3 demos/04_open_world_loop.py   (~30 s)
"""

import numpy as np

from bowl import LoopConfig, MixSpec, ThresholdConfig, build_mlp, run_variant
from bowl import split_experiment, synth_generate

SEED = 0
SCHEDULE = [[0, 1], [2, 3], [4, 5], [6, 7], [8, 9]]


def make_tasks(mix=None):
    train = synth_generate(10, 16, 0.24, 0.1, 3000, seed=1000 + SEED, clip_unit=True)
    test = synth_generate(10, 16, 0.24, 0.1, 1500, seed=2000 + SEED, clip_unit=True)
    return split_experiment(train, test, SCHEDULE, 8, seed=3000 + SEED, mix=mix)


def fresh_net():
    rng = np.random.default_rng(np.random.SeedSequence([SEED, 2]))
    return build_mlp(16, [16, 8], 2, rng, class_ids=[0, 1])


config = LoopConfig(acquisition_batch=128, buffer_capacity=300, ood_batch_size=8,
                    epochs_per_update=2, pretrain_epochs=30, minibatch_size=64,
                    bootstrap=ThresholdConfig(100, 3, 0.99), weight_decay=5e-4,
                    eval_every_update=False, seed=SEED)

# --- 1. Ablation table on the clean stream ----------------------------------

clean = make_tasks()
print(f"{'variant':>14s} | " + " | ".join(f"t={t}" for t in range(1, 5))
      + " |  steps |  odp")
reports = {}
for variant in ("full", "no_ood", "random_query", "no_cl", "finetune"):
    rep = run_variant(fresh_net(), config, clean, variant)
    reports[variant] = rep
    accs = " | ".join(f"{rep.task_accuracies[t]:.3f}" for t in range(1, 5))
    print(f"{variant:>14s} | {accs} | {rep.total_steps:6d} | {rep.odp:5d}")

full = reports["full"]
print("\nfull BOWL observed only "
      f"{full.odp}/{clean.total_stream_size()} stream samples "
      f"({full.odp / clean.total_stream_size():.0%}) and used "
      f"{full.total_steps} gradient steps vs finetune's "
      f"{reports['finetune'].total_steps}.")

# Procurement shrinks within each task as the buffer stabilizes:
per_task = {}
for u in full.updates:
    per_task.setdefault(u.timestep, []).append(u.n_new_inserted)
print("newly inserted per update:", {t: v for t, v in per_task.items()})

# --- 2. Open-world stream: 25% corrupted + 25% foreign batches ---------------

foreign = synth_generate(10, 16, 0.24 * 20, 0.1, 1500, seed=7000 + SEED)
mixed = make_tasks(MixSpec(0.25, 0.25, "gaussian", 0.5, foreign))

print("\nmixed stream (25% corrupted + 25% foreign injected):")
for variant in ("full", "no_ood"):
    rep = run_variant(fresh_net(), config, mixed, variant)
    drop = reports[variant].task_accuracies[4] - rep.task_accuracies[4]
    rejected = sum(t.rejected_batches for t in rep.tasks)
    print(f"{variant:>14s}: final accuracy {rep.task_accuracies[4]:.3f} "
          f"(clean-run drop {drop:+.3f}), rejected {rejected} batches")
print("\nthe filter discards the injected junk, so the full loop barely moves;"
      "\nwithout it the buffer fills with noise and accuracy collapses.")
