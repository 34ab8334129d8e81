"""Challenge figures of merit: accuracy, ROC/AUROC, the true-positive
rates at zero and at fewer-than-ten false positives, threshold-swept
confusion matrices, stratified breakdowns, and the support-weighted f1
for three-class comparisons.

Positives are ``score >= threshold`` everywhere, matching the 0.5
decision convention, and tied scores always cross a threshold together
(the trapezoid runs straight across a tie group). With that tie rule the
top-rank metrics take the pessimistic reading: a positive sharing its
score with a negative cannot be bought without the false positive.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ContractError

DEFAULT_THRESHOLDS = (0.5, 0.8, 0.95, 0.999)
TPR10_MAX_FP = 9  # "fewer than ten" read strictly; pass max_fp=10 for the loose variant


@dataclass
class ScoredSample:
    """One scored test image: probability, truth, optional metadata
    (einstein radius, flux ratio, id) for stratified reports."""

    score: float
    label: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not math.isfinite(self.score) or not 0.0 <= self.score <= 1.0:
            raise ContractError(f"score must be finite in [0, 1], got {self.score}")
        if self.label not in (0, 1):
            raise ContractError(f"label must be 0 or 1, got {self.label}")


def samples_from_arrays(scores, labels, metadata: Optional[Sequence[dict]] = None) -> list[ScoredSample]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ContractError(f"scores {scores.shape} and labels {labels.shape} differ")
    meta = metadata if metadata is not None else [{} for _ in scores]
    return [ScoredSample(float(s), int(l), dict(m)) for s, l, m in zip(scores, labels, meta)]


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int
    threshold: float

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "tp": self.tp, "fp": self.fp,
                "tn": self.tn, "fn": self.fn}


@dataclass(frozen=True)
class RocCurve:
    """Points from (0, 0) to (1, 1); thresholds[i] is the score cut that
    realizes point i (+inf for the empty selection)."""

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auroc: float


def _split_arrays(samples: Sequence[ScoredSample]):
    if not samples:
        raise ContractError("metrics need at least one sample")
    scores = np.array([s.score for s in samples], dtype=np.float64)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return scores, labels


def confusion(samples: Sequence[ScoredSample], threshold: float) -> ConfusionMatrix:
    """Counts under the score >= threshold convention."""
    scores, labels = _split_arrays(samples)
    pred = scores >= threshold
    return ConfusionMatrix(
        tp=int(np.sum(pred & (labels == 1))),
        fp=int(np.sum(pred & (labels == 0))),
        tn=int(np.sum(~pred & (labels == 0))),
        fn=int(np.sum(~pred & (labels == 1))),
        threshold=float(threshold))


def accuracy(cm: ConfusionMatrix) -> float:
    """(TP + TN) / (TP + FP + TN + FN)."""
    if cm.total <= 0:
        raise ContractError("accuracy of an empty confusion matrix")
    return (cm.tp + cm.tn) / cm.total


def _cumulative_rates(samples: Sequence[ScoredSample]):
    """Tie-grouped cumulative (thresholds, fp, tp) plus class totals."""
    scores, labels = _split_arrays(samples)
    npos = int(labels.sum())
    nneg = len(labels) - npos
    if npos == 0 or nneg == 0:
        raise ContractError("both classes must be present")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    last_of_group = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.cumsum(y)[last_of_group]
    fp = (last_of_group + 1) - tp
    thresholds = np.r_[np.inf, s[last_of_group]]
    return thresholds, np.r_[0, fp], np.r_[0, tp], npos, nneg


def roc_and_auroc(samples: Sequence[ScoredSample]) -> RocCurve:
    """Step through distinct score thresholds; integrate by trapezoid."""
    thresholds, fp, tp, npos, nneg = _cumulative_rates(samples)
    fpr = fp / nneg
    tpr = tp / npos
    return RocCurve(thresholds=thresholds, fpr=fpr, tpr=tpr,
                    auroc=float(np.trapezoid(tpr, fpr)))


def tpr_at_fp(samples: Sequence[ScoredSample], max_fp: int) -> float:
    """Best TPR over thresholds whose false-positive count is <= max_fp."""
    if max_fp < 0:
        raise ContractError(f"max_fp must be >= 0, got {max_fp}")
    _, fp, tp, npos, _ = _cumulative_rates(samples)
    return float(tp[fp <= max_fp].max() / npos)


def weighted_f1(true_class: Sequence[int], predicted_class: Sequence[int]) -> float:
    """Support-weighted mean of per-class f1 scores."""
    true = np.asarray(true_class)
    pred = np.asarray(predicted_class)
    if true.shape != pred.shape or true.ndim != 1:
        raise ContractError(f"class arrays must be equal-length vectors, got {true.shape}/{pred.shape}")
    if true.size == 0:
        raise ContractError("weighted f1 needs at least one sample")
    total = 0.0
    for cls in np.unique(np.concatenate([true, pred])):
        support = int(np.sum(true == cls))
        if support == 0:
            continue
        tp = int(np.sum((pred == cls) & (true == cls)))
        fp = int(np.sum((pred == cls) & (true != cls)))
        fn = int(np.sum((pred != cls) & (true == cls)))
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        total += (support / true.size) * f1
    return total


# ---------------------------------------------------------------------------
# stratified reports
# ---------------------------------------------------------------------------

@dataclass
class StratumReport:
    key: str
    lo: float
    hi: float
    count: int
    positives: int
    confusions: dict[float, ConfusionMatrix]

    def fn_rate(self, threshold: float) -> Optional[float]:
        cm = self.confusions[threshold]
        denom = cm.tp + cm.fn
        return cm.fn / denom if denom else None

    def to_dict(self) -> dict:
        return {"key": self.key, "lo": None if math.isinf(self.lo) else self.lo,
                "hi": None if math.isinf(self.hi) else self.hi,
                "count": self.count, "positives": self.positives,
                "confusion_matrices": [cm.to_dict() for cm in self.confusions.values()]}


def default_bin_edges(samples: Sequence[ScoredSample], key: str) -> list[float]:
    """First/third quartiles of the key over the positive samples."""
    values = [s.metadata[key] for s in samples if s.label == 1 and key in s.metadata]
    if not values:
        raise ContractError(f"no positive sample carries metadata key {key!r}")
    return [float(np.quantile(values, 0.25)), float(np.quantile(values, 0.75))]


def stratified_report(samples: Sequence[ScoredSample], key: str,
                      bin_edges: Optional[Sequence[float]] = None,
                      thresholds: Sequence[float] = (0.5,)) -> list[StratumReport]:
    """Per-bin confusion matrices over a metadata field.

    Edges split the real line into len(edges)+1 bins, [edge_i, edge_i+1)
    half-open; no edges means one bin over everything. When edges are
    omitted they default to the positive samples' quartiles.
    """
    if not samples:
        raise ContractError("stratified report needs samples")
    missing = [s.metadata.get("id", i) for i, s in enumerate(samples) if key not in s.metadata]
    if missing:
        raise ContractError(f"samples missing metadata {key!r}: ids {missing[:20]}")
    edges = list(bin_edges) if bin_edges is not None else default_bin_edges(samples, key)
    if sorted(edges) != edges:
        raise ContractError(f"bin edges must be ascending, got {edges}")
    bounds = [-math.inf] + [float(e) for e in edges] + [math.inf]
    reports = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        members = [s for s in samples if lo <= s.metadata[key] < hi]
        cms = {float(t): confusion(members, t) if members else
               ConfusionMatrix(0, 0, 0, 0, float(t)) for t in thresholds}
        reports.append(StratumReport(
            key=key, lo=lo, hi=hi, count=len(members),
            positives=sum(s.label for s in members), confusions=cms))
    return reports


# ---------------------------------------------------------------------------
# full evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    n: int
    positives: int
    negatives: int
    accuracy: float
    auroc: float
    tpr0: float
    tpr10: float
    roc: RocCurve
    confusions: dict[float, ConfusionMatrix]
    stratified: dict[str, list[StratumReport]]

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "positives": self.positives,
            "negatives": self.negatives,
            "accuracy": self.accuracy,
            "auroc": self.auroc,
            "tpr0": self.tpr0,
            "tpr10": self.tpr10,
            "confusion_matrices": [cm.to_dict() for cm in self.confusions.values()],
            "stratified": {k: [r.to_dict() for r in reports]
                           for k, reports in self.stratified.items()},
        }


def evaluate(samples: Sequence[ScoredSample],
             thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
             stratify_keys: Sequence[str] = (),
             stratify_edges: Optional[dict[str, Sequence[float]]] = None,
             tpr10_max_fp: int = TPR10_MAX_FP) -> EvalReport:
    """Headline metrics (accuracy at 0.5), ROC, TPR0/TPR10, confusion
    matrices at each threshold, optional stratified sub-reports."""
    scores, labels = _split_arrays(samples)
    roc = roc_and_auroc(samples)
    cms = {float(t): confusion(samples, t) for t in thresholds}
    acc_cm = cms.get(0.5) or confusion(samples, 0.5)
    stratified = {}
    for key in stratify_keys:
        edges = None if stratify_edges is None else stratify_edges.get(key)
        stratified[key] = stratified_report(samples, key, bin_edges=edges, thresholds=thresholds)
    return EvalReport(
        n=len(samples), positives=int(labels.sum()), negatives=int((1 - labels).sum()),
        accuracy=accuracy(acc_cm), auroc=roc.auroc,
        tpr0=tpr_at_fp(samples, 0), tpr10=tpr_at_fp(samples, tpr10_max_fp),
        roc=roc, confusions=cms, stratified=stratified)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

SCORES_HEADER = ("id", "score", "label", "einstein_radius", "flux_ratio")


def write_scores_csv(samples: Sequence[ScoredSample], path: Union[str, Path]) -> None:
    """CSV id,score,label,einstein_radius,flux_ratio; scores at full
    precision so downstream recomputation is exact."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCORES_HEADER)
        for i, s in enumerate(samples):
            writer.writerow([
                s.metadata.get("id", i),
                repr(float(s.score)),
                s.label,
                repr(float(s.metadata["theta_e"])) if "theta_e" in s.metadata else "",
                repr(float(s.metadata["flux_ratio"])) if "flux_ratio" in s.metadata else "",
            ])


def read_scores_csv(path: Union[str, Path]) -> list[ScoredSample]:
    samples = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            meta = {"id": row["id"]}
            if row.get("einstein_radius"):
                meta["theta_e"] = float(row["einstein_radius"])
            if row.get("flux_ratio"):
                meta["flux_ratio"] = float(row["flux_ratio"])
            samples.append(ScoredSample(float(row["score"]), int(row["label"]), meta))
    if not samples:
        raise ContractError(f"{path}: empty scores file")
    return samples


def write_report_json(report: EvalReport, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def write_roc_csv(roc: RocCurve, path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "fpr", "tpr"])
        for t, f, r in zip(roc.thresholds, roc.fpr, roc.tpr):
            writer.writerow(["inf" if math.isinf(t) else repr(float(t)), repr(float(f)), repr(float(r))])


def write_roc_svg(roc: RocCurve, path: Union[str, Path], title: str = "ROC") -> None:
    """Self-contained SVG plot: the curve, the chance diagonal, axis ticks."""
    size, margin = 360, 50
    span = size - 2 * margin

    def px(f):  # fpr -> x
        return margin + f * span

    def py(t):  # tpr -> y (flipped)
        return size - margin - t * span

    points = " ".join(f"{px(f):.2f},{py(t):.2f}" for f, t in zip(roc.fpr, roc.tpr))
    ticks = []
    for v in (0.0, 0.25, 0.5, 0.75, 1.0):
        ticks.append(f'<line x1="{px(v):.2f}" y1="{size - margin}" x2="{px(v):.2f}" '
                     f'y2="{size - margin + 5}" stroke="black"/>')
        ticks.append(f'<text x="{px(v):.2f}" y="{size - margin + 18}" font-size="10" '
                     f'text-anchor="middle">{v:g}</text>')
        ticks.append(f'<line x1="{margin - 5}" y1="{py(v):.2f}" x2="{margin}" '
                     f'y2="{py(v):.2f}" stroke="black"/>')
        ticks.append(f'<text x="{margin - 8}" y="{py(v) + 3:.2f}" font-size="10" '
                     f'text-anchor="end">{v:g}</text>')
    svg = f"""<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">
<rect width="{size}" height="{size}" fill="white"/>
<text x="{size / 2}" y="20" font-size="13" text-anchor="middle">{title} (AUROC={roc.auroc:.4f})</text>
<line x1="{margin}" y1="{size - margin}" x2="{size - margin}" y2="{size - margin}" stroke="black"/>
<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{size - margin}" stroke="black"/>
<line x1="{px(0):.2f}" y1="{py(0):.2f}" x2="{px(1):.2f}" y2="{py(1):.2f}" stroke="gray" stroke-dasharray="4 3"/>
{chr(10).join(ticks)}
<polyline points="{points}" fill="none" stroke="crimson" stroke-width="1.5"/>
<text x="{size / 2}" y="{size - 10}" font-size="11" text-anchor="middle">false positive rate</text>
<text x="14" y="{size / 2}" font-size="11" text-anchor="middle" transform="rotate(-90 14 {size / 2})">true positive rate</text>
</svg>
"""
    Path(path).write_text(svg)
