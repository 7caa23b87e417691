"""SVG rendering of cluster assignments over the cell graph."""

from __future__ import annotations

import colorsys
from xml.sax.saxutils import escape

import numpy as np

from .model import forward

GOLDEN = 0.618033988749895


def cluster_color(cid):
    """Fixed colour per cluster id: hues spread by the golden ratio."""
    h = (cid * GOLDEN) % 1.0
    r, g, b = colorsys.hls_to_rgb(h, 0.5, 0.65)
    return "#{:02x}{:02x}{:02x}".format(round(r * 255), round(g * 255), round(b * 255))


def node_clusters(graph, ckpt, stage):
    """Hard cluster id per original node at ``stage`` (1-based).

    Stage 1 uses argmax of S1 directly; deeper stages follow the argmax
    chain: node -> its stage-1 cluster -> that cluster's stage-2 cluster ...
    """
    cfg = ckpt.model_cfg
    if not 1 <= stage <= cfg.n_stages:
        raise ValueError(f"stage must be in 1..{cfg.n_stages}, got {stage}")
    normed = graph.with_features(ckpt.norm_stats.apply(graph.features))
    _, stages = forward(normed, ckpt.store, cfg, return_stages=True)
    ids = np.argmax(stages[0].assignment.data, axis=1)
    for s in range(1, stage):
        ids = np.argmax(stages[s].assignment.data, axis=1)[ids]
    return ids


def render_svg(graph, clusters, title=None, radius=3.0, margin=12.0):
    coords = graph.coords
    lo = coords.min(axis=0) - margin
    hi = coords.max(axis=0) + margin
    height, width = hi - lo
    legend_ids = sorted(set(int(c) for c in clusters))
    legend_w = 110
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width + legend_w:.2f}" height="{max(height, 20 + 16 * len(legend_ids)):.2f}">',
    ]
    if title:
        out.append(f"<title>{escape(title)}</title>")
    out.append('<g id="edges" stroke="#888888" stroke-width="0.5">')
    for i, j in graph.edges():
        (r1, c1), (r2, c2) = coords[i] - lo, coords[j] - lo
        out.append(f'<line x1="{c1:.2f}" y1="{r1:.2f}" x2="{c2:.2f}" y2="{r2:.2f}"/>')
    out.append("</g>")
    out.append('<g id="nodes" stroke="#000000" stroke-width="0.3">')
    for k, (r, c) in enumerate(coords - lo):
        cid = int(clusters[k])
        out.append(f'<circle cx="{c:.2f}" cy="{r:.2f}" r="{radius:.2f}" fill="{cluster_color(cid)}" data-cluster="{cid}"/>')
    out.append("</g>")
    out.append(f'<g id="legend" font-family="sans-serif" font-size="10" transform="translate({width + 10:.2f},10)">')
    for row, cid in enumerate(legend_ids):
        y = 16 * row
        out.append(f'<rect x="0" y="{y}" width="10" height="10" fill="{cluster_color(cid)}"/>')
        out.append(f'<text x="14" y="{y + 9}">cluster {cid}</text>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
