"""Confusion matrices, segmentation metrics and the spectral ablation harness."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .forest import ForestParams, predict, train_forest
from .geometry import DEFAULT_RADIUS_M, ABLATION_SCENARIOS, FeatureMask, compute_feature_table, geometric_block, stack_tables
from .model import CLASS_NAMES, N_CLASSES, SemanticClass

logger = logging.getLogger(__name__)

MACC_FOOTER = ("# mAcc = mean recall over classes present in ground truth; "
               "mIoU/wIoU average over classes present in truth or predictions")


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Counts with rows = ground truth class and columns = predicted class."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.shape != (N_CLASSES, N_CLASSES):
            raise EvaluationError(f"confusion matrix must be {N_CLASSES}x{N_CLASSES}")
        if np.any(c < 0):
            raise EvaluationError("confusion matrix entries must be >= 0")
        c = c.copy()
        c.flags.writeable = False
        object.__setattr__(self, "counts", c)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def confusion_matrix(truth, predicted) -> ConfusionMatrix:
    truth = np.asarray(truth, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    if truth.shape != predicted.shape or truth.ndim != 1:
        raise EvaluationError(f"truth has {truth.size} labels but predictions have {predicted.size}")
    for name, arr in (("truth", truth), ("predicted", predicted)):
        if arr.size and (arr.min() < 0 or arr.max() >= N_CLASSES):
            raise EvaluationError(f"{name} holds labels outside 0..{N_CLASSES - 1}")
    flat = np.bincount(truth * N_CLASSES + predicted, minlength=N_CLASSES * N_CLASSES)
    return ConfusionMatrix(flat.reshape(N_CLASSES, N_CLASSES))


@dataclass(frozen=True)
class WiouWeights:
    weights: tuple = (1.0, 1.0, 2.0, 2.0, 2.0, 2.0)

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        if len(w) != N_CLASSES or not all(x > 0 and math.isfinite(x) for x in w):
            raise ValueError(f"need {N_CLASSES} positive finite class weights")
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls) -> "WiouWeights":
        return cls((1.0,) * N_CLASSES)

    @classmethod
    def parse(cls, text: str) -> "WiouWeights":
        return cls(tuple(float(x) for x in text.replace(",", " ").split()))


@dataclass(frozen=True, eq=False)
class MetricReport:
    """Scores as fractions in [0, 1].

    ``per_class_iou`` and ``per_class_recall`` are NaN for classes that do
    not take part in the respective mean.
    """

    per_class_iou: np.ndarray
    per_class_recall: np.ndarray
    miou: float
    wiou: float
    macc: float
    oa: float
    n_points: int
    class_order: tuple = field(default=tuple(SemanticClass))

    def as_dict(self) -> dict:
        out = {"n_points": self.n_points, "oa": self.oa, "macc": self.macc, "miou": self.miou, "wiou": self.wiou}
        for c in self.class_order:
            out[f"iou_{c.name.lower()}"] = float(self.per_class_iou[c])
        return out


def iou_summary(per_class_iou, weights: WiouWeights = WiouWeights()) -> tuple:
    """(mIoU, wIoU) over the classes whose IoU is not NaN."""
    iou = np.asarray(per_class_iou, dtype=np.float64)
    used = ~np.isnan(iou)
    if not used.any():
        raise EvaluationError("no class takes part in the IoU means")
    w = np.asarray(weights.weights)[used]
    return float(iou[used].mean()), float(np.dot(w, iou[used]) / w.sum())


def metrics(cm: ConfusionMatrix, weights: WiouWeights = WiouWeights()) -> MetricReport:
    c = cm.counts.astype(np.float64)
    total = c.sum()
    if total <= 0:
        raise EvaluationError("confusion matrix is empty")
    tp = np.diag(c)
    truth = c.sum(axis=1)
    pred = c.sum(axis=0)
    in_truth = truth > 0
    present = in_truth | (pred > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(present, tp / (truth + pred - tp), np.nan)
        recall = np.where(in_truth, tp / truth, np.nan)
    miou, wiou = iou_summary(iou, weights)
    macc = float(np.nanmean(recall)) if in_truth.any() else float("nan")
    return MetricReport(iou, recall, miou, wiou, macc, float(tp.sum() / total), int(total))


# ---------------------------------------------------------------------------
# ablation


@dataclass(frozen=True, eq=False)
class AblationRow:
    scenario: str
    mask: FeatureMask
    report: MetricReport
    confusion: ConfusionMatrix


def resolve_scenarios(names) -> list:
    """Map scenario names (or "all", or mask strings) to (name, FeatureMask) pairs."""
    if isinstance(names, str):
        names = [names]
    out = []
    for name in names:
        if isinstance(name, FeatureMask):
            out.append((name.scenario_name, name))
        elif name == "all":
            out.extend(ABLATION_SCENARIOS.items())
        elif name in ABLATION_SCENARIOS:
            out.append((name, ABLATION_SCENARIOS[name]))
        else:
            mask = FeatureMask.parse(name)
            out.append((mask.scenario_name, mask))
    if not out:
        raise EvaluationError("no ablation scenarios given")
    return out


def run_ablation(train_clouds: Sequence, test_clouds: Sequence, scenarios="all",
                 params: ForestParams = ForestParams(), radius_m: float = DEFAULT_RADIUS_M,
                 weights: WiouWeights = WiouWeights(), threads: int = 1) -> list:
    """Train and score one forest per scenario; rows keep scenario order.

    Features are scaled per cloud. Every scenario reuses ``params.seed``.
    """
    if not train_clouds or not test_clouds:
        raise EvaluationError("ablation needs at least one train and one test cloud")
    for cloud in [*train_clouds, *test_clouds]:
        if cloud.labels is None:
            raise EvaluationError("ablation clouds must be labeled")
    resolved = resolve_scenarios(scenarios)
    geom: dict = {}
    if any(mask.geometric for _, mask in resolved):
        for cloud in [*train_clouds, *test_clouds]:
            geom[id(cloud)] = geometric_block(cloud.xyz, radius_m)

    def table(clouds, mask):
        return stack_tables(compute_feature_table(c, radius_m, mask, geom.get(id(c))) for c in clouds)

    rows = []
    for name, mask in resolved:
        train = table(train_clouds, mask)
        test = table(test_clouds, mask)
        model = train_forest(train, params=params, threads=threads)
        cm = confusion_matrix(test.labels, predict(model, test))
        report = metrics(cm, weights)
        logger.info("%s: OA %.4f mIoU %.4f", name, report.oa, report.miou)
        rows.append(AblationRow(name, mask, report, cm))
    return rows


# ---------------------------------------------------------------------------
# reports


def _pct(v: float) -> str:
    return "-" if math.isnan(v) else f"{100.0 * v:.2f}"


def format_table(rows: Sequence[tuple]) -> str:
    """Aligned table of (label, MetricReport) rows, percentages with 2 decimals."""
    head = ["Feature vector"] + [CLASS_NAMES[c] for c in SemanticClass] + ["mIoU", "wIoU", "mAcc", "OA"]
    body = []
    for label, rep in rows:
        body.append([label] + [_pct(v) for v in rep.per_class_iou] + [_pct(rep.miou), _pct(rep.wiou),
                                                                       _pct(rep.macc), _pct(rep.oa)])
    widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
    lines = ["  ".join(cell.ljust(widths[0]) if i == 0 else cell.rjust(widths[i]) for i, cell in enumerate(r))
             for r in [head] + body]
    return "\n".join(lines) + "\n" + MACC_FOOTER + "\n"


def format_key_values(rows: Sequence[tuple]) -> str:
    lines = []
    for label, rep in rows:
        cells = [f"scenario={label!r}"] + [f"{k}={_kv(v)}" for k, v in rep.as_dict().items()]
        lines.append(" ".join(cells))
    return "\n".join(lines) + "\n" + MACC_FOOTER + "\n"


def _kv(v) -> str:
    if isinstance(v, int):
        return str(v)
    return "nan" if math.isnan(v) else repr(float(v))


def ablation_report(rows: Sequence[AblationRow], key_values: bool = False) -> str:
    pairs = [(r.scenario, r.report) for r in rows]
    return format_key_values(pairs) if key_values else format_table(pairs)


def report_for(truth, predicted, weights: WiouWeights = WiouWeights(), label: Optional[str] = None) -> str:
    rep = metrics(confusion_matrix(truth, predicted), weights)
    return format_table([(label or "prediction", rep)])
