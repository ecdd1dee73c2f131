"""Per-round evaluation, defense bookkeeping and run summaries."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from lfshield import nn
from lfshield.errors import ContractError

LAST_ROUNDS = 10


@dataclass
class RoundReport:
    round: int
    te: float
    all_acc: float
    src_acc: float | None
    asr: float | None
    selected: list[int]
    excluded: list[int]
    attackers: list[int]
    precision: float | None
    recall: float | None
    mode: str | None = None
    defense_seconds: float = field(default=0.0, compare=False)

    def to_record(self) -> dict:
        """JSON-ready dict; wall-clock timing is left out so records are reproducible."""
        rec = asdict(self)
        rec.pop("defense_seconds")
        return rec


def evaluate(params: nn.ModelParams, test, source: int, target: int) -> dict:
    """TE, All-Acc, Src-Acc and ASR of ``params`` on a test dataset."""
    if len(test) == 0:
        raise ContractError("test set is empty")
    probs = nn.forward(params, test.features).probs
    y = nn.one_hot(test.labels, test.classes)
    pred = probs.argmax(axis=1)
    te = nn.cross_entropy(probs, y)
    all_acc = float(np.mean(pred == test.labels))
    src = test.labels == source
    if src.any():
        src_acc = float(np.mean(pred[src] == source))
        asr = float(np.mean(pred[src] == target))
    else:
        src_acc = asr = None
    return {"te": te, "all_acc": all_acc, "src_acc": src_acc, "asr": asr}


def detection_scores(flagged, attackers) -> tuple[float | None, float | None]:
    """Precision and recall of the flagged set; None where the ratio is 0/0."""
    flagged, attackers = set(flagged), set(attackers)
    hit = len(flagged & attackers)
    precision = hit / len(flagged) if flagged else None
    recall = hit / len(attackers) if attackers else None
    return precision, recall


def coefficient_of_variation(series) -> float:
    """Population std over mean; NaN when the mean is not positive."""
    values = np.asarray([v for v in series], dtype=np.float64)
    if values.size == 0:
        raise ContractError("coefficient of variation of an empty series")
    mu = values.mean()
    if not mu > 0:
        return math.nan
    return float(values.std() / mu)


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def summarize(reports: list[RoundReport], last: int = LAST_ROUNDS) -> dict:
    if not reports:
        raise ContractError("cannot summarize an empty run")
    tail = reports[-last:]
    src_series = [r.src_acc for r in reports if r.src_acc is not None]
    late = [r.src_acc for r in reports[last:] if r.src_acc is not None]
    return {
        "rounds": len(reports),
        "te": _mean(r.te for r in tail),
        "all_acc": _mean(r.all_acc for r in tail),
        "src_acc": _mean(r.src_acc for r in tail),
        "asr": _mean(r.asr for r in tail),
        "cv": coefficient_of_variation(src_series) if src_series else math.nan,
        "cv_after_burn_in": coefficient_of_variation(late) if late else math.nan,
        "precision": _mean(r.precision for r in tail),
        "recall": _mean(r.recall for r in tail),
        "defense_seconds": float(sum(r.defense_seconds for r in reports)),
    }
