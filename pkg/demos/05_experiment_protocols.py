"""Small end-to-end runs of the experiment protocols: task generation,
training, fitting, the component ablation, and the domain-shift study.
Everything lands in ./demo_out as the same CSV files the CLI writes.

Run:  python demos/05_experiment_protocols.py   (a few minutes)

The CLI equivalents:
    metafit gen-tasks --out demo_out --seed 7 --set profile=moderate --set count=24
    metafit train     --out demo_out --seed 7 --set tasks_path=demo_out/tasks.jsonl
    metafit fit       --out demo_out --seed 7 --set tasks_path=... --set checkpoint_path=...
    metafit ablate    --out demo_out --seed 7 --set train_count=48 --set test_count=16
    metafit domain-shift --out demo_out --seed 7 --set train_count=48 --set test_count=16
"""

from metafit.harness import ExperimentConfig, gen_tasks, run_ablation, run_domain_shift, run_fit, run_train
from metafit.meta import MetaConfig

cfg = ExperimentConfig(out_dir="demo_out", seed=7, profile="moderate", count=24,
                       train_count=48, test_count=16)
cfg.meta = MetaConfig(inner_steps=2, outer_lr=3e-3, epochs=2, batch_size=8)

print("generating tasks ...")
cfg.tasks_path = gen_tasks(cfg)
print(f"  wrote {cfg.tasks_path}")

print("training an initializer ...")
ckpt, curve = run_train(cfg)
print(f"  wrote {ckpt}; final heldout mpjpe {curve.rows()[-1][2]:.4f}")

print("fitting every task from the checkpoint ...")
cfg.checkpoint_path = ckpt
records = run_fit(cfg)
print(f"  wrote demo_out/trace.csv and demo_out/summary.csv "
      f"({len(records)} tasks, median mpjpe "
      f"{sorted(r.mpjpe for r in records)[len(records)//2]:.4f})")

print("component ablation grid (8 rows) + variance study (6 rows) ...")
rows, _, _ = run_ablation(cfg)
print(f"  wrote demo_out/ablation.csv with {len(rows)} rows")
for row in rows[:3]:
    print(f"    {row[0]:24s} mean mpjpe {row[6]:.4f}")

print("domain shift clean -> hard ...")
rows, results = run_domain_shift(cfg)
print("  wrote demo_out/domain_shift.csv")
for name, (src, tgt, delta) in results.items():
    print(f"    {name:12s} source {src:.4f} target {tgt:.4f} delta {delta:+.4f}")
