"""Train the toy detector on synthetic slides, then compare clean vs defective labels.

Run: python demos/03_train_toy_detector.py [--steps 200] [--quality]
Training 200 steps takes about half a minute on one CPU core; --quality
adds two more runs (defect-injected and lint-fixed labels).
"""
import argparse

from dualstain import toydetector as td

parser = argparse.ArgumentParser()
parser.add_argument("--steps", type=int, default=200)
parser.add_argument("--seed", type=int, default=0)
parser.add_argument("--quality", action="store_true")
args = parser.parse_args()

train_set, _, test_set = td.synthetic_split(args.seed)
model = td.build_model(td.DetectorConfig(seed=args.seed))
print(f"detector with {model.n_params()} parameters, {len(train_set)} training slides")


def progress(row):
    if row["step"] % 25 == 0:
        print(f"  step {row['step']:>4}  lr {row['lr']:.5f}  loss {row['total']:.4f} "
              f"(obj {row['obj']:.4f}, box {row['box']:.4f})")


log = td.train(model, train_set, td.TrainConfig(max_steps=args.steps, seed=args.seed), progress)
rep = td.evaluate(model, test_set)
print(f"held-out: mAP@0.5 {rep.map50:.3f}  mAP@0.5:0.95 {rep.map5095:.3f}  "
      f"P {rep.p:.3f}  R {rep.r:.3f}")

if args.quality:
    res = td.quality_experiment(args.seed, args.steps)
    print("defects injected:", res.defect_counts, "lint findings:", res.lint_counts)
    for label, r in (("defective labels", res.defective), ("lint-fixed labels", res.fixed)):
        print(f"  {label:<18} P {r.p:.3f}  R {r.r:.3f}  mAP@0.5:0.95 {r.map5095:.3f}")
