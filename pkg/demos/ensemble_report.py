"""Ensemble every fine-tuned cache in a work directory and print the comparison table.

usage: python demos/ensemble_report.py WORK_DIR
"""
import glob
import itertools
import os
import sys

from eegteacher.evaluation import comparison_report, ensemble, format_report, read_cache

work = sys.argv[1] if len(sys.argv) > 1 else "/tmp/eegteacher-demo/work"
paths = sorted(glob.glob(os.path.join(work, "caches", "*.jsonl")))
if not paths:
    sys.exit(f"no caches under {work}/caches")
caches = {c.model_tag: c for c in map(read_cache, paths)}
members = [c for tag, c in caches.items() if tag.startswith("finetune-")]
if len(members) >= 2:
    ens = ensemble(members, "ensemble")
    caches[ens.model_tag] = ens
pairs = list(itertools.combinations(caches, 2))
print(format_report(comparison_report(caches, pairs)), end="")
