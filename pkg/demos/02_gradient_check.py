"""
Gradient check of the regularized loss
======================================

Compares autograd gradients of cross-entropy plus both regularizers against
central finite differences on a tiny double-precision model.
"""

from safr.data import TokenizedExample
from safr.model import ModelConfig
from safr.train import grad_check

config = ModelConfig(vocab_size=12, E=8, d_ff=32, M=2, max_len=5, dropout=0.0,
                     dtype="float64")
example = TokenizedExample([2, 5, 7, 3, 11], ["a", "b", "c", "d", "e"], 1)

for mode in ("eval", "train"):  # train mode uses a fixed draw of the mask noise
    rep = grad_check(config, example, lambda_imp=0.1, lambda_inter=0.1, mode=mode)
    print(f"{mode:5s}: max relative error {rep.max_rel_error:.2e} over {rep.checked} entries")
    for name, err in sorted(rep.per_tensor.items(), key=lambda kv: -kv[1])[:3]:
        print(f"        {name:16s} {err:.2e}")
