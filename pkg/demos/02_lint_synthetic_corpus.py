"""Inject labeling defects into synthetic slides and let the linter find them.

Run: python demos/02_lint_synthetic_corpus.py [--slides N] [--out DIR]
"""
import argparse
from collections import Counter
from pathlib import Path

from dualstain import datasetkit, qclinter, synthgen
from dualstain.datasetkit import Sample

parser = argparse.ArgumentParser()
parser.add_argument("--slides", type=int, default=20)
parser.add_argument("--out", default=None, help="optionally save slides and fixed labels")
args = parser.parse_args()

corpus = synthgen.generate_corpus(args.slides, seed=11)
defects = synthgen.DefectSpec.uniform(0.5, seed=3)
samples, log = [], []
for image_id, image, boxes, reg in corpus:
    bad, entries = synthgen.inject_defects(boxes, reg, defects, image_id)
    samples.append(Sample(image_id, bad, image=image))
    log += entries
print("injected:", dict(Counter(e["rule"] for e in log)))

report = qclinter.lint_dataset(samples, autofix=True)
print(report.summary_text())
for f in report.findings[:5]:
    print(f"  {f.image_id} {f.rule:<17} measurement={f.measurement:.2f} fix={f.suggested_fix}")

clean = qclinter.lint_dataset([Sample(i, report.fixed[i], image=s.image)
                               for i, s in zip(sorted(report.fixed), samples)])
print(f"after autofix the linter reports {clean.summary['total']} findings")

if args.out:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in samples:
        datasetkit.write_image(out / f"{s.image_id}.png", s.image)
        datasetkit.write_yolo_file(out / f"{s.image_id}.txt", report.fixed[s.image_id])
    print(f"slides and fixed labels written to {out}")
