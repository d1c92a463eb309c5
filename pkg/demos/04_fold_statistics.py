"""Recompute the five-fold comparison statistics from the published fold rows.

Run: python demos/04_fold_statistics.py
"""
from dualstain import cli, evalkit

_, text = cli.report_folds()
print(text)
print()
print("headline deltas:", dict(zip(evalkit.FOLD_METRICS,
                                   evalkit.REFERENCE_FOLDS["headline_deltas"])))
