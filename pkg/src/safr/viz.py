"""Deterministic SVG figures of per-token capacity and interference.

Output is plain SVG 1.1 with no external references. Coordinates are
rounded to two decimals and colors to integer RGB so identical inputs give
byte-identical files.
"""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .metrics import capacity, cosine_matrix
from .model import ForwardTrace

CROSS_LAYERS = ("embedding", "vmask", "attention", "fc1", "fc2")

MIN_RADIUS = 2.0
EDGE_THRESHOLD = 0.3
LAYOUT_ITERATIONS = 200

_FONT = 'font-family="sans-serif" font-size="11"'


def _num(x: float) -> str:
    s = f"{x:.2f}"
    return "0.00" if s == "-0.00" else s


def _header(width: float, height: float) -> list[str]:
    return [
        '<?xml version="1.0" encoding="UTF-8" standalone="no"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{_num(width)}" height="{_num(height)}" '
        f'viewBox="0 0 {_num(width)} {_num(height)}">',
    ]


def _write(lines: list[str], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines + ["</svg>"]) + "\n", encoding="utf-8", newline="\n")
    return path


def diverging_color(v: float) -> str:
    """Blue for -1, white for 0, red for +1."""
    v = float(np.clip(v, -1.0, 1.0))
    fade = int(round(255 * (1 - abs(v))))
    if v >= 0:
        return f"#ff{fade:02x}{fade:02x}"
    return f"#{fade:02x}{fade:02x}ff"


def _labels(trace: ForwardTrace) -> list[str]:
    if trace.tokens is not None:
        return list(trace.tokens)
    return [str(i) for i in range(trace.T)]


def layer_rows(trace: ForwardTrace, layer: str) -> np.ndarray:
    """Rows analysed for ``layer``; ``attention`` means head-averaged attention rows."""
    if layer == "attention":
        A = trace.attn_weights.mean(axis=0)
        return A / A.sum(axis=1, keepdims=True)
    return trace.layer(layer).valid


def layer_capacity(trace: ForwardTrace, layer: str) -> np.ndarray:
    if layer == "vmask" and trace.mask_probs is not None:
        return np.asarray(trace.mask_probs, dtype=np.float64)
    return capacity(layer_rows(trace, layer))


def emit_capacity_barchart(trace: ForwardTrace, layer: str, path, values=None,
                           title: str | None = None) -> Path:
    vals = layer_capacity(trace, layer) if values is None else np.asarray(values, float)
    labels = _labels(trace)
    T = len(vals)
    bar_w, gap, plot_h, top, left, bottom = 24.0, 6.0, 200.0, 30.0, 40.0, 90.0
    width = left + T * (bar_w + gap) + gap
    height = top + plot_h + bottom
    lines = _header(width, height)
    lines.append(f'<text x="{_num(left)}" y="18" {_FONT}>'
                 f'{escape(title or f"Capacity ({layer})")}</text>')
    lines.append(f'<line x1="{_num(left)}" y1="{_num(top + plot_h)}" x2="{_num(width)}" '
                 f'y2="{_num(top + plot_h)}" stroke="#000000" stroke-width="1"/>')
    for i, (v, lab) in enumerate(zip(vals, labels)):
        h = plot_h * float(np.clip(v, 0.0, 1.0))
        x = left + gap + i * (bar_w + gap)
        y = top + plot_h - h
        lines.append(f'<rect class="bar" x="{_num(x)}" y="{_num(y)}" width="{_num(bar_w)}" '
                     f'height="{_num(h)}" fill="#4c72b0"><title>{escape(lab)}: '
                     f'{v:.4f}</title></rect>')
        tx, ty = x + bar_w / 2, top + plot_h + 10
        lines.append(f'<text x="{_num(tx)}" y="{_num(ty)}" {_FONT} text-anchor="end" '
                     f'transform="rotate(-60 {_num(tx)} {_num(ty)})">{escape(lab)}</text>')
    return _write(lines, path)


def emit_interference_heatmap(trace: ForwardTrace, layer: str, path,
                              title: str | None = None) -> Path:
    C = cosine_matrix(layer_rows(trace, layer))
    labels = _labels(trace)
    T = C.shape[0]
    cell, left, top = 22.0, 110.0, 110.0
    width = left + T * cell + 10
    height = top + T * cell + 10
    lines = _header(width, height)
    lines.append(f'<text x="10" y="18" {_FONT}>'
                 f'{escape(title or f"Interference ({layer})")}</text>')
    for i in range(T):
        for j in range(T):
            lines.append(
                f'<rect class="cell" x="{_num(left + j * cell)}" y="{_num(top + i * cell)}" '
                f'width="{_num(cell)}" height="{_num(cell)}" fill="{diverging_color(C[i, j])}">'
                f'<title>{escape(labels[i])} / {escape(labels[j])}: {C[i, j]:.4f}</title></rect>')
    for i, lab in enumerate(labels):
        y = top + i * cell + cell * 0.7
        lines.append(f'<text x="{_num(left - 4)}" y="{_num(y)}" {_FONT} '
                     f'text-anchor="end">{escape(lab)}</text>')
        x = left + i * cell + cell * 0.7
        lines.append(f'<text x="{_num(x)}" y="{_num(top - 4)}" {_FONT} '
                     f'transform="rotate(-60 {_num(x)} {_num(top - 4)})">{escape(lab)}</text>')
    return _write(lines, path)


def force_layout(cos: np.ndarray, edge_threshold: float = EDGE_THRESHOLD, seed: int = 0,
                 iterations: int = LAYOUT_ITERATIONS, spring_length: float = 120.0) -> np.ndarray:
    """Spring layout where strongly correlated pairs sit close together.

    Edges (``|cos| >= edge_threshold``) are springs with rest length
    ``(1 - |cos|) * spring_length``; all pairs repel. Starts from a seeded
    permutation of points on a circle.
    """
    T = cos.shape[0]
    if T == 1:
        return np.zeros((1, 2))
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * rng.permutation(T) / T
    pos = spring_length * np.column_stack([np.cos(angles), np.sin(angles)])
    strength = np.abs(cos)
    edges = (strength >= edge_threshold) & ~np.eye(T, dtype=bool)
    rest = (1 - strength) * spring_length + 10.0
    k_rep = (spring_length / 2) ** 2
    temp = spring_length / 4
    for it in range(iterations):
        delta = pos[:, None, :] - pos[None, :, :]
        dist = np.sqrt((delta ** 2).sum(-1))
        np.fill_diagonal(dist, 1.0)
        dist = np.maximum(dist, 1e-3)
        unit = delta / dist[..., None]
        rep = (k_rep / dist ** 2)
        np.fill_diagonal(rep, 0.0)
        spring = np.where(edges, -(dist - rest) * 0.1, 0.0)
        force = ((rep + spring)[..., None] * unit).sum(axis=1)
        norm = np.sqrt((force ** 2).sum(-1, keepdims=True))
        step = temp * (1 - it / iterations)
        pos = pos + force / np.maximum(norm, 1e-9) * np.minimum(norm, step)
    return pos


def emit_token_graph(trace: ForwardTrace, layer: str, path,
                     edge_threshold: float = EDGE_THRESHOLD, layout_seed: int = 0,
                     title: str | None = None) -> Path:
    rows = layer_rows(trace, layer)
    cos = cosine_matrix(rows)
    cap = layer_capacity(trace, layer)
    labels = _labels(trace)
    T = cos.shape[0]
    pos = force_layout(cos, edge_threshold, layout_seed)
    radii = np.maximum(MIN_RADIUS, 18.0 * np.sqrt(np.clip(cap, 0.0, 1.0)))
    margin = 40.0
    lo = pos.min(axis=0) - radii.max() - margin
    pos = pos - lo
    width, height = pos.max(axis=0) + radii.max() + margin
    lines = _header(max(width, 120.0), max(height, 60.0))
    lines.append(f'<text x="10" y="18" {_FONT}>'
                 f'{escape(title or f"Token graph ({layer})")}</text>')
    for i in range(T):
        for j in range(i + 1, T):
            c = cos[i, j]
            if abs(c) < edge_threshold:
                continue
            color = "#d62728" if c > 0 else "#1f77b4"
            lines.append(
                f'<line class="edge" x1="{_num(pos[i, 0])}" y1="{_num(pos[i, 1])}" '
                f'x2="{_num(pos[j, 0])}" y2="{_num(pos[j, 1])}" stroke="{color}" '
                f'stroke-width="{_num(0.5 + 2.5 * abs(c))}" stroke-opacity="0.7"/>')
    for i in range(T):
        lines.append(
            f'<circle class="node" cx="{_num(pos[i, 0])}" cy="{_num(pos[i, 1])}" '
            f'r="{_num(radii[i])}" fill="#8fbbd9" stroke="#333333" stroke-width="0.5">'
            f'<title>{escape(labels[i])}: {cap[i]:.4f}</title></circle>')
        lines.append(f'<text x="{_num(pos[i, 0] + radii[i] + 2)}" y="{_num(pos[i, 1] + 4)}" '
                     f'{_FONT}>{escape(labels[i])}</text>')
    return _write(lines, path)


def emit_cross_layer(trace: ForwardTrace, path_dir, example_id: str = "example") -> list[Path]:
    """Capacity and interference panels for every layer, named ``{id}_{layer}_{panel}.svg``."""
    out = []
    d = Path(path_dir)
    for layer in CROSS_LAYERS:
        if layer == "vmask" and trace.mask_probs is None:
            title = "Capacity (vmask: no mask layer, capacity of embeddings)"
        elif layer == "vmask":
            title = "Importance scores (vmask)"
        else:
            title = None
        out.append(emit_capacity_barchart(trace, layer, d / f"{example_id}_{layer}_capacity.svg",
                                          title=title))
        out.append(emit_interference_heatmap(trace, layer,
                                             d / f"{example_id}_{layer}_interference.svg"))
    return out
