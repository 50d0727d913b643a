"""Bare-bones SVG output: line plots and heatmaps, no styling dependencies.

CSV files stay the authoritative output; these are quick looks only.
"""

import numpy as np

W, H, PAD = 480, 360, 48


def _frame(title, xlabel, ylabel):
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
        f'viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">',
        f'<rect x="{PAD}" y="{PAD // 2}" width="{W - 1.5 * PAD:.0f}" height="{H - 1.5 * PAD:.0f}" '
        'fill="none" stroke="black"/>',
        f'<text x="{W / 2:.0f}" y="14" text-anchor="middle">{title}</text>',
        f'<text x="{W / 2:.0f}" y="{H - 6}" text-anchor="middle">{xlabel}</text>',
        f'<text x="12" y="{H / 2:.0f}" transform="rotate(-90 12 {H / 2:.0f})" '
        f'text-anchor="middle">{ylabel}</text>',
    ]


def _scaler(lo, hi, a, b):
    span = (hi - lo) or 1.0
    return lambda v: a + (np.asarray(v, float) - lo) / span * (b - a)


COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def line_plot(path, series, title="", xlabel="", ylabel="", logx=False):
    """``series``: list of (label, x, y); NaNs break nothing, they are dropped."""
    xs = np.concatenate([np.asarray(s[1], float) for s in series])
    ys = np.concatenate([np.asarray(s[2], float) for s in series])
    ok = np.isfinite(xs) & np.isfinite(ys)
    tx = np.log10 if logx else (lambda v: np.asarray(v, float))
    x0, x1 = float(np.min(tx(xs[ok]))), float(np.max(tx(xs[ok])))
    y0, y1 = float(np.min(ys[ok])), float(np.max(ys[ok]))
    sx = _scaler(x0, x1, PAD, W - PAD / 2)
    sy = _scaler(y0, y1, H - PAD, PAD / 2)
    out = _frame(title, xlabel, ylabel)
    out.append(f'<text x="{PAD}" y="{H - PAD + 14}">{x0:.3g}</text>')
    out.append(f'<text x="{W - PAD / 2}" y="{H - PAD + 14}" text-anchor="end">{x1:.3g}</text>')
    out.append(f'<text x="{PAD - 4}" y="{H - PAD}" text-anchor="end">{y0:.3g}</text>')
    out.append(f'<text x="{PAD - 4}" y="{PAD / 2 + 8}" text-anchor="end">{y1:.3g}</text>')
    for k, (label, x, y) in enumerate(series):
        x, y = np.asarray(x, float), np.asarray(y, float)
        keep = np.isfinite(x) & np.isfinite(y)
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(sx(tx(x[keep])), sy(y[keep])))
        col = COLORS[k % len(COLORS)]
        out.append(f'<polyline fill="none" stroke="{col}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{W - PAD}" y="{PAD + 14 * k}" fill="{col}" '
                   f'text-anchor="end">{label}</text>')
    out.append("</svg>")
    _write(path, out)


def heatmap(path, grid, title="", xlabel="", ylabel="", log=True):
    """``grid[i, j]``: value at x-bin i, y-bin j on the unit square."""
    g = np.asarray(grid, float)
    v = np.log10(np.maximum(g, 1e-12)) if log else g
    lo, hi = float(np.nanmin(v)), float(np.nanmax(v))
    nx, ny = g.shape
    cw = (W - 1.5 * PAD) / nx
    ch = (H - 1.5 * PAD) / ny
    out = _frame(title, xlabel, ylabel)
    for i in range(nx):
        for j in range(ny):
            t = 0.0 if hi == lo else (v[i, j] - lo) / (hi - lo)
            shade = int(255 * (1.0 - t))
            out.append(f'<rect x="{PAD + i * cw:.2f}" y="{H - PAD - (j + 1) * ch:.2f}" '
                       f'width="{cw:.2f}" height="{ch:.2f}" fill="rgb({shade},{shade},255)"/>')
    out.append("</svg>")
    _write(path, out)


def _write(path, lines):
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
