"""
Training with and without the regularizers
==========================================

A plain transformer, one with only the word mask, and one with the mask
plus both regularizers are trained on a synthetic sentiment corpus where a
few polarity words decide the label. The deletion score (accuracy drop when
the highest-capacity FC1 tokens are removed) shows how well capacity tracks
the words that matter.
"""

from _corpus import OUT, corpus
from safr.evaluate import sensitivity_curve, srs
from safr.model import ModelConfig
from safr.train import TrainConfig, train

ds = corpus()
print(ds["train"].N, "train examples, vocabulary", len(ds.vocab))

VARIANTS = {
    "baseline": (False, 0.0, 0.0),
    "vmask": (True, 0.0, 0.0),
    "safr": (True, 0.1, 0.1),
}

models = {}
for name, (use_vmask, li, lx) in VARIANTS.items():
    mc = ModelConfig(vocab_size=len(ds.vocab), E=32, d_ff=128, M=4, max_len=ds.max_len,
                     use_vmask=use_vmask)
    tc = TrainConfig(lambda_imp=li, lambda_inter=lx, epochs=6, batch_size=32)
    ck, hist = train(mc, tc, ds, log_path=OUT / f"{name}_log.tsv")
    ck.save(OUT / f"{name}.ck")
    models[name] = ck.model()
    print(f"{name:8s} best dev acc {ck.dev_acc:.3f} (epoch {ck.epoch})")

# Deletion score at k = 30 percent
print("\n          acc_s   acc_r   acc_k     srs")
for name, model in models.items():
    r = srs(model, ds["test"], 30)
    print(f"{name:8s} {r.acc_original:6.2f}  {r.acc_random:6.2f}  {r.acc_capacity:6.2f}  {r.srs:6.2f}")

# Accuracy after deletion as k grows
ks = [10, 20, 30, 40, 50, 60, 70]
print("\nk        " + "".join(f"{k:7d}" for k in ks))
for name, model in models.items():
    curve = sensitivity_curve(model, ds["test"], ks, path=OUT / f"{name}_sensitivity.tsv")
    print(f"{name:8s} " + "".join(f"{r.acc_capacity:7.1f}" for r in curve))
