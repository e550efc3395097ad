"""Minimal standalone SVG line plots (no plotting dependency)."""

from __future__ import annotations

from pathlib import Path

from .errors import IoError

WIDTH, HEIGHT = 720, 440
MARGIN = 60
MAX_POINTS = 2000
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _decimate(xs, ys):
    n = len(xs)
    if n <= MAX_POINTS:
        return xs, ys
    step = (n - 1) / (MAX_POINTS - 1)
    idx = [round(i * step) for i in range(MAX_POINTS)]
    return [xs[i] for i in idx], [ys[i] for i in idx]


def _ticks(lo, hi, n=5):
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def emit_plot(series: dict, path, title: str = "", xlabel: str = "", ylabel: str = "") -> None:
    """Write one SVG with a polyline (or marker) per named series.

    ``series`` maps a label to a pair of equal-length sequences (x, y).
    Series longer than 2000 points are decimated evenly. Single points are
    drawn as circles so they stay visible.
    """
    if not series or all(len(v[0]) == 0 for v in series.values()):
        raise ValueError("emit_plot needs at least one nonempty series")
    cleaned = {}
    for name, (xs, ys) in series.items():
        if len(xs) != len(ys):
            raise ValueError(f"series {name!r} has mismatched lengths")
        cleaned[name] = _decimate(list(map(float, xs)), list(map(float, ys)))

    all_x = [x for xs, _ in cleaned.values() for x in xs]
    all_y = [y for _, ys in cleaned.values() for y in ys]
    x_lo, x_hi = min(all_x), max(all_x)
    y_lo, y_hi = min(all_y), max(all_y)
    if x_hi == x_lo:
        x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
    if y_hi == y_lo:
        pad = abs(y_lo) * 0.1 or 0.5
        y_lo, y_hi = y_lo - pad, y_hi + pad

    def sx(x):
        return MARGIN + (x - x_lo) / (x_hi - x_lo) * (WIDTH - 2 * MARGIN)

    def sy(y):
        return HEIGHT - MARGIN - (y - y_lo) / (y_hi - y_lo) * (HEIGHT - 2 * MARGIN)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<line x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN}" '
        f'y2="{HEIGHT - MARGIN}" stroke="black"/>',
        f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{HEIGHT - MARGIN}" '
        f'stroke="black"/>',
    ]
    if title:
        parts.append(
            f'<text x="{WIDTH / 2}" y="{MARGIN / 2}" text-anchor="middle" '
            f'font-size="16">{title}</text>'
        )
    if xlabel:
        parts.append(
            f'<text x="{WIDTH / 2}" y="{HEIGHT - 12}" text-anchor="middle" '
            f'font-size="12">{xlabel}</text>'
        )
    if ylabel:
        parts.append(
            f'<text x="16" y="{HEIGHT / 2}" text-anchor="middle" font-size="12" '
            f'transform="rotate(-90 16 {HEIGHT / 2})">{ylabel}</text>'
        )
    for tx in _ticks(x_lo, x_hi):
        parts.append(
            f'<text x="{sx(tx):.1f}" y="{HEIGHT - MARGIN + 18}" text-anchor="middle" '
            f'font-size="10">{tx:.4g}</text>'
        )
    for ty in _ticks(y_lo, y_hi):
        parts.append(
            f'<text x="{MARGIN - 6}" y="{sy(ty):.1f}" text-anchor="end" '
            f'font-size="10">{ty:.4g}</text>'
        )
    for i, (name, (xs, ys)) in enumerate(cleaned.items()):
        color = COLORS[i % len(COLORS)]
        if len(xs) == 1:
            parts.append(
                f'<circle cx="{sx(xs[0]):.2f}" cy="{sy(ys[0]):.2f}" r="4" fill="{color}"/>'
            )
        else:
            pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys))
            parts.append(
                f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>'
            )
        ly = MARGIN + 16 * i
        parts.append(
            f'<line x1="{WIDTH - MARGIN - 110}" y1="{ly}" x2="{WIDTH - MARGIN - 90}" '
            f'y2="{ly}" stroke="{color}" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{WIDTH - MARGIN - 84}" y="{ly + 4}" font-size="11">{name}</text>'
        )
    parts.append("</svg>")
    try:
        Path(path).write_text("\n".join(parts))
    except OSError as exc:
        raise IoError(f"cannot write plot to {path}: {exc}") from exc
