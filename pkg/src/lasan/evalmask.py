"""Discrimination metrics and lead-group masking analysis."""
import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .dataio import LEADS, Label
from .errors import ContractError, UndefinedMetricError

CLASS_NAMES = tuple(lab.name for lab in Label)  # index order: CONTROL, ARVC, LQTS

CANONICAL_GROUPS = {
    "right_precordial": (2, 3, 4),
    "lateral": (0, 6, 7),
    "precordial": (2, 3, 4, 5, 6, 7),
    "limb": (0, 1),
}


@dataclass(frozen=True)
class RocResult:
    auroc: float
    n_pos: int
    n_neg: int


def auroc_binary(scores, labels):
    """Mann-Whitney AUROC: P(score_pos > score_neg) with ties counted as 1/2.

    Computed from midranks, which gives exactly the pair-counting value.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ContractError(f"scores and labels differ in length ({s.size} vs {y.size})", module="evalmask")
    if not np.all(np.isin(y, (0, 1))):
        raise ContractError("labels must be 0/1", module="evalmask")
    n_pos = int((y == 1).sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"AUROC undefined with {n_pos} positives and {n_neg} negatives")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(s.size, dtype=np.float64)
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return RocResult(float(u / (n_pos * n_neg)), n_pos, n_neg)


def auroc_macro(probs, labels, n_classes=3):
    """One-vs-rest AUROC per class and their unweighted mean.

    Returns ``(macro, per_class)`` with ``per_class`` a tuple indexed like the
    columns of ``probs``.
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels).reshape(-1)
    if p.ndim != 2 or p.shape[1] != n_classes or p.shape[0] != y.size:
        raise ContractError(f"probs shape {p.shape} does not match {y.size} records x {n_classes} classes", module="evalmask")
    present = set(np.unique(y).tolist())
    missing = [c for c in range(n_classes) if c not in present]
    if missing:
        raise UndefinedMetricError(f"macro AUROC needs every class present; missing {missing}")
    per = tuple(auroc_binary(p[:, c], (y == c).astype(int)).auroc for c in range(n_classes))
    return float(np.mean(per)), per


def task_auroc(probs, targets, n_classes):
    """Macro AUROC (3-class) or binary AUROC with per-class values."""
    if n_classes == 2:
        a = auroc_binary(np.asarray(probs).reshape(-1), targets).auroc
        return a, (a,)
    return auroc_macro(probs, targets, n_classes)


@dataclass(frozen=True)
class ConfusionMetrics:
    sensitivity: float
    specificity: float
    balanced_accuracy: float
    accuracy: float
    tp: int
    fn: int
    tn: int
    fp: int


def confusion_from_counts(tp, fn, tn, fp):
    nan = float("nan")
    sens = tp / (tp + fn) if tp + fn else nan
    spec = tn / (tn + fp) if tn + fp else nan
    bal = (sens + spec) / 2 if tp + fn and tn + fp else nan
    n = tp + fn + tn + fp
    acc = (tp + tn) / n if n else nan
    return ConfusionMetrics(sens, spec, bal, acc, tp, fn, tn, fp)


def confusion_metrics(scores, labels, threshold=0.5):
    """Thresholded binary metrics; a metric whose class is empty is NaN."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if not np.all(np.isin(y, (0, 1))):
        raise ContractError("labels must be 0/1", module="evalmask")
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fn = int(np.sum(~pred & (y == 1)))
    tn = int(np.sum(~pred & (y == 0)))
    fp = int(np.sum(pred & (y == 0)))
    return confusion_from_counts(tp, fn, tn, fp)


def youden_threshold(scores, labels):
    """Threshold maximising sensitivity + specificity - 1 (ties: lowest threshold)."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    best_t, best_j = 0.5, -np.inf
    for t in np.unique(s):
        m = confusion_metrics(s, labels, t)
        j = m.sensitivity + m.specificity - 1
        if j > best_j:
            best_t, best_j = float(t), j
    return best_t


# ---------------------------------------------------------------- masking


def mask_leads(signal, group):
    """Zero the leads in ``group`` (indices into I, II, V1..V6); works on (8, L) or (B, 8, L)."""
    sig = np.array(signal, copy=True)
    group = tuple(int(g) for g in group)
    n_leads = sig.shape[-2]
    for g in group:
        if not 0 <= g < n_leads:
            raise ContractError(f"lead index {g} outside 0..{n_leads - 1}", module="evalmask")
    if group:
        sig[..., list(group), :] = 0
    return sig


@dataclass
class MaskingReport:
    """Baseline and masked AUROCs; drops are relative percent and absolute points."""

    class_names: tuple
    baseline: dict
    masked: dict = field(default_factory=dict)
    groups: dict = field(default_factory=dict)

    def drop_pct(self, group, cls="macro"):
        b = self.baseline[cls]
        if b == 0:
            return float("nan")
        return 100.0 * (b - self.masked[group][cls]) / b

    def drop_points(self, group, cls="macro"):
        return self.baseline[cls] - self.masked[group][cls]

    def rows(self):
        out = []
        for g in self.masked:
            for cls in ("macro", *self.class_names):
                out.append(
                    (g, cls, self.baseline[cls], self.masked[g][cls], self.drop_pct(g, cls), self.drop_points(g, cls))
                )
        return out

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "class", "baseline_auroc", "masked_auroc", "drop_pct", "drop_points"])
        for g, cls, b, m, dp, da in self.rows():
            w.writerow([g, cls, f"{b:.6f}", f"{m:.6f}", f"{dp:.4f}", f"{da:.6f}"])
        return buf.getvalue()

    def to_svg(self, width=640, height=360):
        return masking_svg(self, width, height)


def _auroc_dict(probs, targets, n_classes, class_names):
    macro, per = task_auroc(probs, targets, n_classes)
    d = {"macro": macro}
    d.update(zip(class_names, per))
    return d


def masking_analysis(predict_fn, dataset, groups=None, n_classes=3, class_names=None):
    """AUROC drops when each lead group is zeroed in every test record.

    ``predict_fn(x, x_fm)`` returns class probabilities for a batch of
    normalized signals; ``dataset.targets`` holds the labels. Foundation
    inputs are re-derived from the masked signal so both branches see it.
    """
    from .dataio import resample_for_foundation

    groups = dict(CANONICAL_GROUPS if groups is None else groups)
    if class_names is None:
        class_names = CLASS_NAMES if n_classes == 3 else ("positive",)
    targets = dataset.targets
    base = _auroc_dict(predict_fn(dataset.x, dataset.x_fm), targets, n_classes, class_names)
    report = MaskingReport(tuple(class_names), base)
    for name, group in groups.items():
        xm = mask_leads(dataset.x, group)
        xm_fm = np.stack([resample_for_foundation(s) for s in xm]) if len(xm) else xm
        report.masked[name] = _auroc_dict(predict_fn(xm, xm_fm), targets, n_classes, class_names)
        report.groups[name] = tuple(group)
    return report


_BAR_COLOURS = ("#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3")


def masking_svg(report, width=640, height=360):
    """Grouped bar chart: one cluster per lead group, one bar per class (relative % drop)."""
    series = (*report.class_names, "macro")
    groups = list(report.masked)
    # undefined drops (zero baseline) are drawn as empty bars
    vals = [[float(np.nan_to_num(report.drop_pct(g, c))) for c in series] for g in groups]
    flat = [v for row in vals for v in row] or [0.0]
    top = max(1.0, max(flat))
    bottom = min(0.0, min(flat))
    left, right, upper, lower = 60, 20, 40, 60
    pw = width - left - right
    ph = height - upper - lower

    def ypos(v):
        return upper + ph * (top - v) / (top - bottom)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">'
        "AUROC drop (%) with lead group masked</text>",
        f'<line x1="{left}" y1="{ypos(0):.2f}" x2="{width - right}" y2="{ypos(0):.2f}" stroke="black"/>',
        f'<line x1="{left}" y1="{upper}" x2="{left}" y2="{upper + ph}" stroke="black"/>',
    ]
    for tick in np.linspace(bottom, top, 5):
        out.append(
            f'<text x="{left - 6}" y="{ypos(tick) + 4:.2f}" text-anchor="end" font-family="sans-serif" '
            f'font-size="10">{tick:.1f}</text>'
        )
    cluster = pw / max(1, len(groups))
    bar = cluster * 0.8 / len(series)
    for gi, g in enumerate(groups):
        x0 = left + gi * cluster + cluster * 0.1
        for si, v in enumerate(vals[gi]):
            y_top = ypos(max(v, 0.0))
            h = abs(ypos(v) - ypos(0.0))
            out.append(
                f'<rect x="{x0 + si * bar:.2f}" y="{y_top:.2f}" width="{bar * 0.9:.2f}" height="{h:.2f}" '
                f'fill="{_BAR_COLOURS[si % len(_BAR_COLOURS)]}"><title>{g} {series[si]}: {v:.2f}%</title></rect>'
            )
        lead_names = "/".join(LEADS[i] for i in report.groups.get(g, ()))
        out.append(
            f'<text x="{x0 + cluster * 0.4:.2f}" y="{upper + ph + 16}" text-anchor="middle" font-family="sans-serif" '
            f'font-size="11">{g}</text>'
        )
        out.append(
            f'<text x="{x0 + cluster * 0.4:.2f}" y="{upper + ph + 30}" text-anchor="middle" font-family="sans-serif" '
            f'font-size="9">{lead_names}</text>'
        )
    for si, name in enumerate(series):
        lx = left + 10 + si * 90
        out.append(f'<rect x="{lx}" y="{height - 18}" width="10" height="10" fill="{_BAR_COLOURS[si % len(_BAR_COLOURS)]}"/>')
        out.append(f'<text x="{lx + 14}" y="{height - 9}" font-family="sans-serif" font-size="10">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
