"""
Interference, polysemanticity and capacity
==========================================

Three views of how much token representations share directions. Rows of
``H`` are tokens.
"""

import numpy as np

from safr.metrics import capacity, cosine_matrix, interference_matrix, polysemanticity

np.set_printoptions(precision=4, suppress=True)

# Orthogonal tokens: nothing is shared, every token owns its direction.
H = np.eye(3)
print("orthogonal   P =", polysemanticity(H), " C =", capacity(H))

# Two identical tokens split one direction between them.
H = np.array([[1.0, 0.0], [1.0, 0.0]])
print("duplicated   P =", polysemanticity(H), " C =", capacity(H))

# A token halfway between two others overlaps with both.
H = np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
print("\ninterference\n", interference_matrix(H))
print("cosine\n", cosine_matrix(H))
print("capacity", capacity(H), "sum", capacity(H).sum())

# Packing more tokens than dimensions forces superposition: total capacity
# drops well below T.
rng = np.random.default_rng(0)
for T in (2, 4, 8, 16, 32):
    H = rng.normal(size=(T, 4))
    print(f"T={T:2d} in 4 dims: sum C = {capacity(H).sum():6.3f}")
