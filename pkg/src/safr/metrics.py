"""Superposition metrics over token representation matrices.

All three quantities are defined per layer on the ``T x D`` matrix whose rows
are the hidden representations of the tokens of one input:

* interference ``I[i, j] = h_i . h_j``
* polysemanticity ``P[i] = sum_{j != i} (h_i/|h_i| . h_j)^2``
* capacity ``C[i] = (h_i . h_i)^2 / sum_j (h_i . h_j)^2``

Everything is computed in float64. Rows whose norm falls below ``EPS_NORM``
are treated as zero vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EPS_NORM = 1e-8

LAYER_TAGS = ("embedding", "vmask", "attention_out", "fc1", "fc2")


@dataclass
class RepresentationMatrix:
    """Token representations of one layer for one input.

    Rows at index ``>= valid_len`` are padding and never reach a metric.
    """

    layer_tag: str
    rows: np.ndarray
    valid_len: int | None = None

    def __post_init__(self):
        if self.layer_tag not in LAYER_TAGS:
            raise ValueError(f"unknown layer tag {self.layer_tag!r}")
        self.rows = _as_matrix(self.rows)
        if self.valid_len is None:
            self.valid_len = self.rows.shape[0]
        if not 1 <= self.valid_len <= self.rows.shape[0]:
            raise ValueError(
                f"valid_len {self.valid_len} outside [1, {self.rows.shape[0]}]")

    @property
    def valid(self) -> np.ndarray:
        return self.rows[: self.valid_len]


@dataclass
class MetricsReport:
    interference: np.ndarray
    polysemanticity: np.ndarray
    capacity: np.ndarray
    capacity_sum: float = field(init=False)

    def __post_init__(self):
        self.capacity_sum = float(self.capacity.sum())


def _as_matrix(H) -> np.ndarray:
    if isinstance(H, np.ndarray) and H.dtype != object:
        M = H.astype(np.float64, copy=False)
    else:
        rows = list(H)
        lengths = {len(r) for r in rows}
        if len(lengths) > 1:
            raise ValueError(f"rows have mismatched dimensions {sorted(lengths)}")
        M = np.asarray(rows, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] < 1 or M.shape[1] < 1:
        raise ValueError(f"expected a non-empty T x D matrix, got shape {M.shape}")
    return M


def _valid_rows(H) -> np.ndarray:
    if isinstance(H, RepresentationMatrix):
        return H.valid
    return _as_matrix(H)


def _unit_rows(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(M, axis=1)
    nonzero = norms >= EPS_NORM
    unit = np.zeros_like(M)
    unit[nonzero] = M[nonzero] / norms[nonzero, None]
    return unit, nonzero


def interference_matrix(H) -> np.ndarray:
    M = _valid_rows(H)
    G = M @ M.T
    # force bit-exact symmetry: take the upper triangle once
    upper = np.triu(G)
    return upper + np.triu(G, 1).T


def polysemanticity(H) -> np.ndarray:
    M = _valid_rows(H)
    unit, nonzero = _unit_rows(M)
    proj = unit @ M.T
    np.fill_diagonal(proj, 0.0)
    out = (proj ** 2).sum(axis=1)
    out[~nonzero] = 0.0
    return out


def capacity(H) -> np.ndarray:
    """Fraction of each token's direction dedicated to that token.

    The denominator sums over every row including the token itself, which
    keeps each value in ``[0, 1]`` and the total in ``[1, T]`` when no row
    vanishes.
    """
    M = _valid_rows(H)
    _, nonzero = _unit_rows(M)
    G = interference_matrix(M)
    denom = (G ** 2).sum(axis=1)
    out = np.zeros(M.shape[0])
    out[nonzero] = np.diag(G)[nonzero] ** 2 / denom[nonzero]
    return out


def cosine_matrix(H) -> np.ndarray:
    M = _valid_rows(H)
    unit, nonzero = _unit_rows(M)
    C = unit @ unit.T
    C = np.triu(C) + np.triu(C, 1).T
    C = np.clip(C, -1.0, 1.0)
    np.fill_diagonal(C, nonzero.astype(np.float64))
    return C


def metrics_report(H) -> MetricsReport:
    return MetricsReport(
        interference=interference_matrix(H),
        polysemanticity=polysemanticity(H),
        capacity=capacity(H),
    )
