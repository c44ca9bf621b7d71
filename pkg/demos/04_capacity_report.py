"""
Capacity of important tokens
============================

Splits tokens by the word mask's keep probability (top 30 percent vs the
rest) and compares their mean FC1 capacity. Uses the checkpoint written by
``03_train_and_srs.py``.
"""

from _corpus import OUT, corpus
from safr.evaluate import capacity_report
from safr.model import Checkpoint
from safr.toydata import NEGATIVE, POSITIVE

ds = corpus()
model = Checkpoint.load(OUT / "safr.ck").model()

rep = capacity_report(model, ds["test"])
print(f"all {rep.mean_all:.4f}  important {rep.mean_important:.4f}  rest {rep.mean_rest:.4f}"
      f"  (n = {rep.n_important} / {rep.n_rest})")

# The corpus knows which words carry the label, so the mask can be checked
# directly: how many of the top-scored tokens are polarity words?
polar = set(POSITIVE) | set(NEGATIVE)
ranked = sorted(rep.records, key=lambda r: -r[3])[:rep.n_important]
share = sum(r[2] in polar for r in ranked) / len(ranked)
base = sum(r[2] in polar for r in rep.records) / len(rep.records)
print(f"polarity words among top-scored tokens: {share:.1%} (base rate {base:.1%})")

by_type = capacity_report(model, ds["test"], per_type=True)
print(f"per type: important {by_type.mean_important:.4f} rest {by_type.mean_rest:.4f}")
