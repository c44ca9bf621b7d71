"""
Figures for one sentence
========================

Capacity bar chart, interference heatmap and token graph at FC1, then the
capacity and interference panels for every layer. All output is SVG.
"""

from _corpus import OUT, corpus
from safr.model import Checkpoint
from safr.viz import (emit_capacity_barchart, emit_cross_layer, emit_interference_heatmap,
                      emit_token_graph)

ds = corpus()
model = Checkpoint.load(OUT / "safr.ck").model()
example = ds["test"].examples[3]
print(" ".join(example.tokens), "->", example.label)

trace = model.trace(example)
fig = OUT / "figures"
emit_capacity_barchart(trace, "fc1", fig / "ex3_fc1_capacity.svg")
emit_interference_heatmap(trace, "fc1", fig / "ex3_fc1_interference.svg")
emit_token_graph(trace, "fc1", fig / "ex3_fc1_graph.svg", edge_threshold=0.3, layout_seed=0)
emit_cross_layer(trace, fig, "ex3")  # rewrites the two fc1 panels unchanged
print(f"wrote {len(list(fig.glob('ex3_*.svg')))} files to {fig}")

for tok, p in zip(trace.tokens, trace.mask_probs):
    print(f"{tok:>12s} {p:.3f} " + "#" * int(40 * p))
