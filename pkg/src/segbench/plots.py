"""Self-contained SVG plots and the markdown summary table."""
from xml.sax.saxutils import escape

from .models import ARCHS

PANEL_W = 320
PANEL_H = 240
MARGIN = 40
FOLD_COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def _svg(width, height, body, header_comment):
    return (
        '<?xml version="1.0" encoding="UTF-8"?>\n'
        f"<!-- {escape(header_comment)} -->\n"
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">\n'
        + "\n".join(body)
        + "\n</svg>\n"
    )


def _fmt(v):
    return f"{v:.2f}"


def _axes(x0, y0, title, xlabel, ylabel):
    w, h = PANEL_W - 2 * MARGIN, PANEL_H - 2 * MARGIN
    return [
        f'<rect x="{x0 + MARGIN}" y="{y0 + MARGIN}" width="{w}" height="{h}" fill="none" stroke="#000"/>',
        f'<text x="{x0 + PANEL_W / 2}" y="{y0 + MARGIN - 10}" text-anchor="middle">{escape(title)}</text>',
        f'<text x="{x0 + PANEL_W / 2}" y="{y0 + PANEL_H - 8}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="{x0 + 12}" y="{y0 + PANEL_H / 2}" text-anchor="middle" '
        f'transform="rotate(-90 {x0 + 12} {y0 + PANEL_H / 2})">{escape(ylabel)}</text>',
    ]


def roc_xy(fpr, tpr, x0=0.0, y0=0.0):
    """Pixel position of an ROC point inside the panel at (x0, y0)."""
    w, h = PANEL_W - 2 * MARGIN, PANEL_H - 2 * MARGIN
    return x0 + MARGIN + fpr * w, y0 + MARGIN + (1.0 - tpr) * h


def render_roc(points, header_comment="segbench", label=None):
    """Pooled ROC curve with the chance diagonal as reference."""
    body = _axes(0, 0, "ROC" + (f" ({label})" if label else ""), "false positive rate", "true positive rate")
    (ax, ay), (bx, by) = roc_xy(0, 0), roc_xy(1, 1)
    body.append(
        f'<line class="diagonal" x1="{_fmt(ax)}" y1="{_fmt(ay)}" x2="{_fmt(bx)}" y2="{_fmt(by)}" '
        'stroke="#999" stroke-dasharray="4 3"/>'
    )
    coords = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in (roc_xy(p[0], p[1]) for p in points))
    body.append(f'<polyline class="roc" points="{coords}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>')
    return _svg(PANEL_W, PANEL_H, body, header_comment)


def _loss_panel(x0, series, title, split):
    body = _axes(x0, 0, title, "epoch", "BCE loss")
    values = [v for s in series.values() for v in s]
    if not values:
        return body
    lo, hi = min(values), max(values)
    span = hi - lo or 1.0
    w, h = PANEL_W - 2 * MARGIN, PANEL_H - 2 * MARGIN
    longest = max(len(s) for s in series.values())
    for fold, s in sorted(series.items()):
        pts = []
        for e, v in enumerate(s):
            x = x0 + MARGIN + (e / max(longest - 1, 1)) * w
            y = MARGIN + (1.0 - (v - lo) / span) * h
            pts.append(f"{_fmt(x)},{_fmt(y)}")
        color = FOLD_COLORS[fold % len(FOLD_COLORS)]
        body.append(
            f'<polyline class="loss {split} fold-{fold}" points="{" ".join(pts)}" fill="none" stroke="{color}"/>'
        )
    return body


def render_loss_curves(train_series, val_series, header_comment="segbench"):
    """Two panels, training and validation loss per epoch, one polyline per fold.

    Both arguments map fold id to a list of per-epoch losses.
    """
    body = _loss_panel(0, train_series, "training loss per epoch", "train")
    body += _loss_panel(PANEL_W, val_series, "validation loss per epoch", "val")
    return _svg(2 * PANEL_W, PANEL_H, body, header_comment)


def render_plots(result, header_comment="segbench"):
    """{filename: svg text} for one ExperimentResult."""
    train = {f: r.train_loss for f, r in enumerate(result.records)}
    val = {f: r.val_loss for f, r in enumerate(result.records)}
    return {
        "loss_curves.svg": render_loss_curves(train, val, header_comment),
        "roc.svg": render_roc(result.pooled.roc, header_comment, result.arch),
    }


# --- summary table -------------------------------------------------------------

SUMMARY_ROWS = (
    ("AUC", "auc"),
    ("Accuracy", "accuracy"),
    ("Sensitivity", "sensitivity"),
    ("Specificity", "specificity"),
    ("Parameters", "params"),
    ("Training seconds", "train_seconds"),
)


def summary_row(result, label=None):
    """Flatten an ExperimentResult into the fields of one summary column."""
    row = dict(result.aggregate)
    row.update(arch=result.arch, label=label or result.arch, params=result.params, train_seconds=result.train_seconds)
    return row


def _cell(key, v):
    if v is None:
        return "n/a"
    if key == "params":
        return str(int(v))
    return f"{v:.3f}"


def write_summary(rows, header_comment=None):
    """Markdown table, one column per result, columns ordered cnn, unet, vit, vssm."""
    rows = [r if isinstance(r, dict) else summary_row(r) for r in rows]
    order = {a: i for i, a in enumerate(ARCHS)}
    rows = sorted(enumerate(rows), key=lambda p: (order.get(p[1]["arch"], len(ARCHS)), p[0]))
    rows = [r for _, r in rows]
    lines = []
    if header_comment:
        lines.append(f"<!-- {header_comment} -->")
    lines.append("| metric | " + " | ".join(r.get("label", r["arch"]) for r in rows) + " |")
    lines.append("|---|" + "---|" * len(rows))
    for title, key in SUMMARY_ROWS:
        lines.append(f"| {title} | " + " | ".join(_cell(key, r.get(key)) for r in rows) + " |")
    lines.append("")
    lines.append("Training seconds depend on the machine and are not covered by determinism guarantees.")
    return "\n".join(lines) + "\n"
