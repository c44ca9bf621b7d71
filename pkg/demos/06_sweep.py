"""
Regularizer weight sweep
========================

One model per (lambda_imp, lambda_inter) cell; results go to a TSV with one
row per cell. Kept to a small grid and short training so it runs in a
minute or two.
"""

from _corpus import OUT, corpus
from safr.evaluate import sweep
from safr.model import ModelConfig
from safr.train import TrainConfig

ds = corpus()
mc = ModelConfig(vocab_size=len(ds.vocab), E=32, d_ff=128, M=4, max_len=ds.max_len)
tc = TrainConfig(epochs=6, batch_size=32)

grid = [(li, lx) for li in (0.0, 0.1, 1.0) for lx in (0.0, 0.1, 1.0)]
rows = sweep(grid, mc, tc, ds, dataset_name="synthetic", random_seeds=(0, 1),
             path=OUT / "sweep.tsv")
print((OUT / "sweep.tsv").read_text())
