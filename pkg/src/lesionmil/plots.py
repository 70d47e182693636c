"""Self-contained SVG plots (no external renderer): per-fold ROC curves and
a percentage-vs-ground-truth scatter on a log scale."""

from __future__ import annotations

import numpy as np

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2")
_W, _H, _M = 480, 400, 56


def _header(title: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2}" y="20" text-anchor="middle" font-size="14" '
        f'font-family="sans-serif">{title}</text>',
    ]


def _axes(xlabel: str, ylabel: str) -> list[str]:
    x0, y0, x1, y1 = _M, _H - _M, _W - _M, _M
    return [
        f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>',
        f'<text x="{(x0 + x1) / 2}" y="{_H - 14}" text-anchor="middle" '
        f'font-size="12" font-family="sans-serif">{xlabel}</text>',
        f'<text x="16" y="{(y0 + y1) / 2}" text-anchor="middle" font-size="12" '
        f'font-family="sans-serif" transform="rotate(-90 16 {(y0 + y1) / 2})">{ylabel}</text>',
    ]


def _to_px(x: float, y: float) -> tuple[float, float]:
    # unit square -> plot area
    return _M + x * (_W - 2 * _M), (_H - _M) - y * (_H - 2 * _M)


def roc_points(posteriors, labels) -> tuple[np.ndarray, np.ndarray]:
    """Stairstep ROC coordinates (FPR, TPR), threshold descending."""
    p = np.asarray(posteriors, dtype=np.float64)
    y = np.asarray(labels)
    order = np.argsort(-p, kind="stable")
    tp = np.cumsum(y[order] > 0)
    fp = np.cumsum(y[order] <= 0)
    n_pos, n_neg = int((y > 0).sum()), int((y <= 0).sum())
    fpr = np.concatenate(([0.0], fp / max(n_neg, 1)))
    tpr = np.concatenate(([0.0], tp / max(n_pos, 1)))
    return fpr, tpr


def svg_roc(curves: dict[str, tuple], title: str = "ROC per fold") -> str:
    """``curves`` maps a legend label to (posteriors, labels)."""
    parts = _header(title) + _axes("false positive rate", "true positive rate")
    x0, y0 = _to_px(0.0, 0.0)
    x1, y1 = _to_px(1.0, 1.0)
    parts.append(
        f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y1}" stroke="#bbbbbb" stroke-dasharray="4 3"/>'
    )
    for i, (label, (post, labels)) in enumerate(curves.items()):
        fpr, tpr = roc_points(post, labels)
        color = _PALETTE[i % len(_PALETTE)]
        cmds = []
        px, py = _to_px(fpr[0], tpr[0])
        cmds.append(f"M {px:.2f} {py:.2f}")
        for j in range(1, len(fpr)):
            hx, _ = _to_px(fpr[j], tpr[j - 1])
            px, py = _to_px(fpr[j], tpr[j])
            cmds.append(f"L {hx:.2f} {_to_px(0, tpr[j - 1])[1]:.2f}")
            cmds.append(f"L {px:.2f} {py:.2f}")
        parts.append(
            f'<path d="{" ".join(cmds)}" fill="none" stroke="{color}" stroke-width="1.5"/>'
        )
        parts.append(
            f'<text x="{_W - _M + 4}" y="{_M + 14 * i}" font-size="10" '
            f'font-family="sans-serif" fill="{color}">{label}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def svg_scatter(
    x,
    y,
    xlabel: str,
    ylabel: str,
    title: str,
    log_floor: float = 1e-3,
) -> str:
    """Scatter of two positive quantities on log10 axes; values at or below
    zero are clamped to ``log_floor`` so they stay visible at the axis edge."""
    x = np.maximum(np.asarray(x, dtype=np.float64), log_floor)
    y = np.maximum(np.asarray(y, dtype=np.float64), log_floor)
    lx, ly = np.log10(x), np.log10(y)
    lo = min(lx.min(), ly.min()) - 0.1
    hi = max(lx.max(), ly.max()) + 0.1
    span = max(hi - lo, 1e-9)
    parts = _header(title) + _axes(f"{xlabel} (log10)", f"{ylabel} (log10)")
    for xi, yi in zip(lx, ly):
        px, py = _to_px((xi - lo) / span, (yi - lo) / span)
        parts.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="3" fill="#1f77b4" fill-opacity="0.7"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
