"""Confusion matrices, the four summary metrics, and their report files."""
import csv
import dataclasses
import io
from dataclasses import dataclass

import numpy as np

from .errors import EmptyEvaluation, ShapeError

METRIC_COLUMNS = ("channels", "train_params", "accuracy", "precision", "recall", "f1")


@dataclass(frozen=True)
class ConfusionMatrix:
    """Abnormal (label 1) is the positive class."""

    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other):
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    degenerate: tuple = ()  # names of metrics that hit 0/0


def confusion_matrix(probs, labels, threshold=0.5):
    probs = np.asarray(probs, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if probs.shape != labels.shape:
        raise ShapeError(f"{probs.size} probabilities vs {labels.size} labels")
    pred = probs >= threshold
    pos = labels == 1
    return ConfusionMatrix(
        tp=int(np.sum(pred & pos)), fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)), fn=int(np.sum(~pred & pos)))


def _ratio(num, den, name, flags):
    if den == 0:
        flags.append(name)
        return 0.0
    return 100.0 * num / den


def compute_metrics(cm):
    """Percentages; any 0/0 becomes 0 and is listed in ``degenerate``."""
    if cm.total <= 0:
        raise EmptyEvaluation("confusion matrix is empty")
    flags = []
    acc = 100.0 * (cm.tp + cm.tn) / cm.total
    prec = _ratio(cm.tp, cm.tp + cm.fp, "precision", flags)
    rec = _ratio(cm.tp, cm.tp + cm.fn, "recall", flags)
    f1 = _ratio(2 * prec * rec, (prec + rec) * 100.0, "f1", flags)
    return Metrics(acc, prec, rec, f1, tuple(flags))


# --- lead-count experiments ------------------------------------------------------

LEAD_ARMS = ("I", "I-III", "limb", "all")


@dataclass
class ArmResult:
    arm: str
    leads: tuple
    train_params: int
    confusion: ConfusionMatrix
    metrics: Metrics
    params: object
    history: list


def run_lead_experiments(train, test, lead_names, model_config, train_config,
                         arms=LEAD_ARMS, val=None, dtype=np.float32):
    """Train and score one model per lead subset on shared data.

    ``train``/``test``/``val`` are ``(x, y)`` with ``x`` holding every lead in
    ``lead_names`` order; each arm slices its channels out and gets a copy of
    ``model_config`` with ``in_channels`` set to match.
    """
    from .config import resolve_leads
    from .labels import compute_class_weights
    from .nn import predict, train_model

    lead_names = list(lead_names)
    results = []
    for arm in arms:
        leads = resolve_leads(arm)
        missing = [v for v in leads if v not in lead_names]
        if missing:
            raise ShapeError(f"arm {arm}: leads {missing} are not in the data")
        idx = [lead_names.index(v) for v in leads]
        mc = dataclasses.replace(model_config, in_channels=len(leads))
        tc = dataclasses.replace(train_config, class_weights=compute_class_weights(train[1]))
        arm_val = None if val is None else (val[0][:, idx], val[1])
        params, history, _ = train_model((train[0][:, idx], train[1]), arm_val, mc, tc)
        probs = predict(mc, params, test[0][:, idx], dtype=dtype)
        cm = confusion_matrix(probs, test[1])
        results.append(ArmResult(arm, tuple(leads), params.n_trainable(mc), cm,
                                 compute_metrics(cm), params, history))
    return results


# --- reports ----------------------------------------------------------------------

def metrics_csv(rows):
    """``rows``: iterable of (channels, train_params, Metrics)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for channels, n_params, m in rows:
        w.writerow([channels, n_params] + [f"{v:.2f}" for v in (m.accuracy, m.precision, m.recall, m.f1)])
    return buf.getvalue()


def confusion_csv(cm):
    return ("actual,predicted_normal,predicted_abnormal\n"
            f"normal,{cm.tn},{cm.fp}\nabnormal,{cm.fn},{cm.tp}\n")


def _esc(text):
    return str(text).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def confusion_svg(cm, title="Confusion matrix"):
    cells = [[cm.tn, cm.fp], [cm.fn, cm.tp]]
    peak = max(max(r) for r in cells) or 1
    size, x0, y0 = 120, 130, 60
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{x0 + 2 * size + 20}" '
        f'height="{y0 + 2 * size + 60}" font-family="sans-serif" font-size="13">',
        f'<text x="{x0 + size}" y="24" text-anchor="middle" font-size="15">{_esc(title)}</text>',
    ]
    names = ("normal", "abnormal")
    for i in range(2):
        for j in range(2):
            v = cells[i][j]
            shade = int(255 - 200 * v / peak)
            fill = f"rgb({shade},{shade},255)"
            ink = "white" if shade < 140 else "black"
            x, y = x0 + j * size, y0 + i * size
            parts.append(f'<rect x="{x}" y="{y}" width="{size}" height="{size}" '
                         f'fill="{fill}" stroke="black"/>')
            parts.append(f'<text x="{x + size / 2}" y="{y + size / 2 + 5}" text-anchor="middle" '
                         f'fill="{ink}">{v}</text>')
        parts.append(f'<text x="{x0 - 8}" y="{y0 + i * size + size / 2 + 5}" '
                     f'text-anchor="end">{names[i]}</text>')
        parts.append(f'<text x="{x0 + i * size + size / 2}" y="{y0 + 2 * size + 20}" '
                     f'text-anchor="middle">{names[i]}</text>')
    parts.append(f'<text x="{x0 + size}" y="{y0 + 2 * size + 45}" text-anchor="middle">predicted</text>')
    parts.append(f'<text x="16" y="{y0 + size}" transform="rotate(-90 16 {y0 + size})" '
                 f'text-anchor="middle">actual</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def bar_chart_svg(counts, title):
    """Plain vertical bar chart for a {label: count} mapping."""
    labels = list(counts)
    peak = max(counts.values(), default=0) or 1
    bar, gap, height, x0, y0 = 60, 20, 240, 50, 40
    width = x0 + len(labels) * (bar + gap) + gap
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{y0 + height + 50}" '
             f'font-family="sans-serif" font-size="12">',
             f'<text x="{width / 2}" y="22" text-anchor="middle" font-size="15">{_esc(title)}</text>',
             f'<line x1="{x0}" y1="{y0 + height}" x2="{width - gap / 2}" y2="{y0 + height}" stroke="black"/>']
    for i, lab in enumerate(labels):
        h = height * counts[lab] / peak
        x = x0 + gap + i * (bar + gap)
        parts.append(f'<rect x="{x}" y="{y0 + height - h:.1f}" width="{bar}" height="{h:.1f}" fill="steelblue"/>')
        parts.append(f'<text x="{x + bar / 2}" y="{y0 + height - h - 4:.1f}" text-anchor="middle">{counts[lab]}</text>')
        parts.append(f'<text x="{x + bar / 2}" y="{y0 + height + 16}" text-anchor="middle">{_esc(lab)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def line_chart_svg(series, title, xlabel="epoch"):
    """Overlayed polylines for {name: [y0, y1, ...]}; NaNs are skipped."""
    colors = ("steelblue", "darkorange", "seagreen", "crimson")
    w, h, x0, y0 = 480, 260, 50, 40
    vals = [v for ys in series.values() for v in ys if v == v]
    lo, hi = (min(vals), max(vals)) if vals else (0.0, 1.0)
    hi = hi if hi > lo else lo + 1.0
    n = max((len(ys) for ys in series.values()), default=1)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w + x0 + 140}" height="{h + y0 + 40}" '
             f'font-family="sans-serif" font-size="12">',
             f'<text x="{x0 + w / 2}" y="22" text-anchor="middle" font-size="15">{_esc(title)}</text>',
             f'<rect x="{x0}" y="{y0}" width="{w}" height="{h}" fill="none" stroke="black"/>',
             f'<text x="{x0 + w / 2}" y="{y0 + h + 30}" text-anchor="middle">{_esc(xlabel)}</text>',
             f'<text x="{x0 - 4}" y="{y0 + 10}" text-anchor="end">{hi:.3g}</text>',
             f'<text x="{x0 - 4}" y="{y0 + h}" text-anchor="end">{lo:.3g}</text>']
    for k, (name, ys) in enumerate(series.items()):
        pts = [f"{x0 + w * i / max(n - 1, 1):.1f},{y0 + h - h * (v - lo) / (hi - lo):.1f}"
               for i, v in enumerate(ys) if v == v]
        color = colors[k % len(colors)]
        if pts:
            parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{" ".join(pts)}"/>')
        parts.append(f'<text x="{x0 + w + 10}" y="{y0 + 16 + 18 * k}" fill="{color}">{_esc(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
