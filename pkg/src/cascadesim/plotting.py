"""Deterministic SVG rendering of a scene and its rollout fan."""
from __future__ import annotations

import numpy as np

from .scenario import Scenario
from .traffic import box_corners

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
           "#e377c2", "#17becf")


def _f(v: float) -> str:
    return f"{v:.3f}"


def render_svg(scenario: Scenario, rollouts=None, size: int = 800, margin: float = 5.0,
               box_every: int = 10) -> str:
    """SVG with lanes, agent boxes along their history and the trajectory fan.

    Colour encodes the world-rollout index and opacity the motion index.
    ``rollouts`` may be a :class:`~cascadesim.pipeline.RolloutSet` or ``None``.
    """
    pts = [scenario.history[..., :2].reshape(-1, 2)]
    if rollouts is not None:
        pts.append(rollouts.states[..., :2].reshape(-1, 2))
    allp = np.vstack(pts)
    lo = allp.min(axis=0) - margin
    hi = allp.max(axis=0) + margin
    span = float(max(hi - lo))
    scale = size / span

    def xy(p):
        return _f((p[0] - lo[0]) * scale), _f(size - (p[1] - lo[1]) * scale)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">',
           f'<rect width="{size}" height="{size}" fill="#ffffff"/>',
           '<g id="map" fill="none" stroke="#999999">']
    for line, hw in zip(scenario.lane_map.polylines, scenario.lane_map.half_widths):
        d = " ".join(",".join(xy(p)) for p in line)
        out.append(f'<polyline points="{d}" stroke-width="{_f(2 * hw * scale)}" '
                   f'stroke-opacity="0.25"/>')
        out.append(f'<polyline points="{d}" stroke-width="1" stroke-dasharray="4 4"/>')
    out.append("</g>")

    if rollouts is not None:
        out.append('<g id="rollouts" fill="none" stroke-width="1.2">')
        m = max(rollouts.m, 1)
        for s, (i, j) in zip(rollouts.states, rollouts.provenance):
            color = PALETTE[i % len(PALETTE)]
            alpha = 1.0 - 0.8 * j / m
            for a in range(s.shape[0]):
                d = " ".join(",".join(xy(p)) for p in s[a, :, :2])
                out.append(f'<polyline points="{d}" stroke="{color}" stroke-opacity="{_f(alpha)}"/>')
        out.append("</g>")

    out.append('<g id="agents" stroke="#000000" stroke-width="1">')
    corners = box_corners(scenario.history, scenario.footprints)
    T = scenario.history.shape[1]
    frames = sorted(set(range(0, T, box_every)) | {T - 1})
    for a in range(scenario.n_agents):
        fill = "#f4a300" if a == scenario.ego_index else "#555555"
        for f in frames:
            op = 0.2 + 0.8 * f / max(T - 1, 1)
            d = " ".join(",".join(xy(p)) for p in corners[a, f])
            out.append(f'<polygon points="{d}" fill="{fill}" fill-opacity="{_f(op)}"/>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
