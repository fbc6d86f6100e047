"""Hand-rolled SVG line charts; no plotting dependency.

Good enough for the metric-vs-p sweep figures: one polyline per series,
min/mid/max ticks, a small legend.
"""

WIDTH, HEIGHT = 640, 420
MARGIN = 60
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _scale(vals, lo, hi, out_lo, out_hi):
    span = hi - lo if hi > lo else 1.0
    return [out_lo + (v - lo) / span * (out_hi - out_lo) for v in vals]


def line_chart(series, title="", xlabel="", ylabel=""):
    """Render [(label, [(x, y), ...]), ...] into an SVG string."""
    xs = [x for _, pts in series for x, _ in pts]
    ys = [y for _, pts in series for _, y in pts]
    if not xs:
        raise ValueError("nothing to plot")
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    pad = 0.05 * (y_hi - y_lo if y_hi > y_lo else 1.0)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    left, right = MARGIN, WIDTH - MARGIN // 2
    top, bottom = MARGIN // 2, HEIGHT - MARGIN

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="18" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>',
        f'<text x="{(left + right) / 2}" y="{HEIGHT - 14}" text-anchor="middle">{xlabel}</text>',
        f'<text x="16" y="{(top + bottom) / 2}" text-anchor="middle" '
        f'transform="rotate(-90 16 {(top + bottom) / 2})">{ylabel}</text>',
    ]
    for frac in (0.0, 0.5, 1.0):
        xv = x_lo + frac * (x_hi - x_lo)
        yv = y_lo + frac * (y_hi - y_lo)
        xp = left + frac * (right - left)
        yp = bottom - frac * (bottom - top)
        parts.append(f'<line x1="{xp:.1f}" y1="{bottom}" x2="{xp:.1f}" '
                     f'y2="{bottom + 4}" stroke="black"/>')
        parts.append(f'<text x="{xp:.1f}" y="{bottom + 18}" '
                     f'text-anchor="middle">{xv:.3g}</text>')
        parts.append(f'<line x1="{left - 4}" y1="{yp:.1f}" x2="{left}" '
                     f'y2="{yp:.1f}" stroke="black"/>')
        parts.append(f'<text x="{left - 8}" y="{yp + 4:.1f}" '
                     f'text-anchor="end">{yv:.3g}</text>')

    for k, (label, pts) in enumerate(series):
        color = PALETTE[k % len(PALETTE)]
        pts = sorted(pts)
        px = _scale([p[0] for p in pts], x_lo, x_hi, left, right)
        py = _scale([p[1] for p in pts], y_lo, y_hi, bottom, top)
        coords = " ".join(f"{x:.1f},{y:.1f}" for x, y in zip(px, py))
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" '
                     f'stroke-width="2"/>')
        for x, y in zip(px, py):
            parts.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="3" fill="{color}"/>')
        ly = top + 16 + 16 * k
        parts.append(f'<line x1="{right - 110}" y1="{ly - 4}" x2="{right - 90}" '
                     f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{right - 84}" y="{ly}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts)
