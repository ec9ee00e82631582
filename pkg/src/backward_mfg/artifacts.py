"""CSV, SVG and manifest writers.  Output bytes depend only on the data."""
from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def fmt(x: float) -> str:
    """17 significant digits: enough to round-trip any double."""
    return format(float(x), ".17g")


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def matrix_columns(name: str, rows: int, cols: int) -> list[str]:
    return [f"{name}_{i}{j}" for i in range(rows) for j in range(cols)]


def vector_columns(name: str, n: int) -> list[str]:
    return [f"{name}_{i}" for i in range(n)]


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, config_bytes: bytes, settings: dict, files: Sequence[Path]) -> Path:
    from . import __version__

    manifest = {
        "command": command,
        "version": f"backward-mfg {__version__}",
        "config_sha256": hashlib.sha256(config_bytes).hexdigest(),
        "settings": settings,
        "files": {Path(f).name: sha256_file(f) for f in sorted(files, key=lambda f: Path(f).name)},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def svg_plot(
    path: Path,
    t: np.ndarray,
    series: Sequence[tuple[str, np.ndarray]],
    title: str,
    width: int = 640,
    height: int = 400,
) -> Path:
    """Line chart of several series against a shared time axis."""
    left, right, top, bottom = 70, 20, 40, 50
    pw, ph = width - left - right, height - top - bottom
    t = np.asarray(t, dtype=float)
    ys = [np.asarray(y, dtype=float) for _, y in series]
    lo = min(float(y.min()) for y in ys)
    hi = max(float(y.max()) for y in ys)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad
    t0, t1 = float(t[0]), float(t[-1])

    def px(tv):
        return left + (tv - t0) / (t1 - t0) * pw

    def py(yv):
        return top + (hi - yv) / (hi - lo) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-family="sans-serif" font-size="15">{title}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for k in range(5):
        tv = t0 + (t1 - t0) * k / 4
        yv = lo + (hi - lo) * k / 4
        out.append(f'<line x1="{px(tv):.2f}" y1="{top + ph}" x2="{px(tv):.2f}" y2="{top + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{px(tv):.2f}" y="{top + ph + 20}" text-anchor="middle" font-family="sans-serif" font-size="11">{tv:.3g}</text>')
        out.append(f'<line x1="{left - 5}" y1="{py(yv):.2f}" x2="{left}" y2="{py(yv):.2f}" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{py(yv) + 4:.2f}" text-anchor="end" font-family="sans-serif" font-size="11">{yv:.3g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle" font-family="sans-serif" font-size="12">t</text>')
    # Thin the polyline so figures stay small for long grids.
    stride = max(1, len(t) // 500)
    idx = np.unique(np.append(np.arange(0, len(t), stride), len(t) - 1))
    show_legend = len(series) <= len(PALETTE)
    for k, (label, y) in enumerate(series):
        colour = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{px(t[i]):.2f},{py(y[i]):.2f}" for i in idx)
        out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.2" points="{pts}"/>')
        if show_legend:
            ly = top + 14 * k + 8
            out.append(f'<line x1="{left + pw - 90}" y1="{ly}" x2="{left + pw - 70}" y2="{ly}" stroke="{colour}" stroke-width="2"/>')
            out.append(f'<text x="{left + pw - 65}" y="{ly + 4}" font-family="sans-serif" font-size="11">{label}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")
    return Path(path)
