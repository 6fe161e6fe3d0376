"""Open-set evaluation: close-set accuracy, H-score, OSCR, and exports.

Both heads are evaluated as separate confidence tracks: the `cls` track
averages the two branches' classification logits and scores by maximum
softmax probability; the `bcls` track averages the one-vs-all logits and
scores by the sigmoid of the top averaged logit. Logits are averaged before
the nonlinearity in both tracks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .networks import MainNetwork

__all__ = [
    "UNKNOWN",
    "PredictionRecord",
    "EvalReport",
    "predict",
    "close_set_accuracy",
    "derive_lambda",
    "h_score",
    "oscr",
    "evaluate_head",
    "export_embeddings",
    "write_report",
    "write_predictions",
]

UNKNOWN = -1

HEADS = ("cls", "bcls")


@dataclass(frozen=True)
class PredictionRecord:
    sample_id: int
    true_class: int  # UNKNOWN for unseen-category samples
    predicted: int  # seen-class id
    confidence: float
    head: str

    @property
    def is_unknown(self) -> bool:
        return self.true_class == UNKNOWN


@dataclass
class EvalReport:
    head: str
    acc: float
    h_score: float
    oscr: float
    lam: float
    n_known: int
    n_unknown: int

    def to_dict(self) -> dict:
        return {
            "head": self.head,
            "acc": self.acc,
            "h_score": self.h_score,
            "oscr": self.oscr,
            "lambda": self.lam,
            "n_known": self.n_known,
            "n_unknown": self.n_unknown,
        }


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def predict(main: MainNetwork, x: np.ndarray) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per-head (predicted head-index, confidence) arrays for a feature batch.

    Predictions are indices into the network's seen-class outputs; callers map
    them back to dataset class ids.
    """
    with ad.no_grad():
        out = main.forward(x)
    cls_avg = 0.5 * (out.cls_logits1.data + out.cls_logits2.data)
    shifted = cls_avg - cls_avg.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    cls_pred = p.argmax(axis=1)
    cls_conf = p.max(axis=1)

    bcls_avg = 0.5 * (out.bcls_logits1.data + out.bcls_logits2.data)
    bcls_pred = bcls_avg.argmax(axis=1)
    bcls_conf = _sigmoid(bcls_avg.max(axis=1))
    return {"cls": (cls_pred, cls_conf), "bcls": (bcls_pred, bcls_conf)}


def close_set_accuracy(records: list[PredictionRecord]) -> float:
    if not records:
        raise ValueError("close_set_accuracy: no records")
    if any(r.is_unknown for r in records):
        raise ValueError("close_set_accuracy: expects known-class records only")
    return sum(r.predicted == r.true_class for r in records) / len(records)


def derive_lambda(val_confidences: list[float] | np.ndarray, quantile: float = 0.05) -> float:
    """Empirical quantile (linear interpolation) of source-validation confidences."""
    vals = np.asarray(val_confidences, dtype=np.float64)
    if vals.size == 0:
        raise ValueError("derive_lambda: empty confidence list")
    if not 0.0 <= quantile <= 1.0:
        raise ValueError(f"derive_lambda: quantile must be in [0, 1], got {quantile}")
    return float(np.quantile(vals, quantile, method="linear"))


def _split_populations(
    records: list[PredictionRecord],
) -> tuple[list[PredictionRecord], list[PredictionRecord]]:
    known = [r for r in records if not r.is_unknown]
    unknown = [r for r in records if r.is_unknown]
    if not known or not unknown:
        raise ValueError("need both known and unknown records")
    return known, unknown


def h_score(records: list[PredictionRecord], lam: float, accepted_only: bool = False) -> float:
    """Harmonic mean of known-accept accuracy and unknown rejection at threshold lam.

    By default a known sample rejected at the threshold counts as an error
    (denominator = all knowns); `accepted_only` restricts the denominator to
    accepted knowns instead.
    """
    known, unknown = _split_populations(records)
    accepted = [r for r in known if r.confidence >= lam]
    correct = sum(r.predicted == r.true_class for r in accepted)
    if accepted_only:
        acc_k = correct / len(accepted) if accepted else 0.0
    else:
        acc_k = correct / len(known)
    acc_u = sum(r.confidence < lam for r in unknown) / len(unknown)
    if acc_k + acc_u == 0.0:
        return 0.0
    return 2.0 * acc_k * acc_u / (acc_k + acc_u)


def oscr(records: list[PredictionRecord], integration: str = "trapezoid") -> float:
    """Area under the correct-classification-rate vs false-positive-rate curve.

    Thresholds sweep all distinct confidences (samples at the threshold are
    included on both sides). The curve is extended horizontally to FPR=0 and
    closed at (FPR=1, plain correct-classification rate).
    """
    if integration not in ("trapezoid", "step"):
        raise ValueError(f"oscr: unknown integration {integration!r}")
    known, unknown = _split_populations(records)
    kc = np.asarray([r.confidence for r in known])
    correct = np.asarray([r.predicted == r.true_class for r in known])
    uc = np.asarray([r.confidence for r in unknown])
    points = []
    for theta in sorted(set(np.concatenate([kc, uc]).tolist()), reverse=True):
        ccr = float(((kc >= theta) & correct).sum()) / len(known)
        fpr = float((uc >= theta).sum()) / len(unknown)
        points.append((fpr, ccr))
    points = [(0.0, points[0][1])] + points + [(1.0, float(correct.sum()) / len(known))]
    area = 0.0
    for (f0, c0), (f1, c1) in zip(points, points[1:]):
        if integration == "trapezoid":
            area += (f1 - f0) * 0.5 * (c0 + c1)
        else:
            area += (f1 - f0) * c0
    return area


def evaluate_head(
    records: list[PredictionRecord],
    lam: float,
    integration: str = "trapezoid",
    hscore_accepted_only: bool = False,
) -> EvalReport:
    known, unknown = _split_populations(records)
    return EvalReport(
        head=records[0].head,
        acc=close_set_accuracy(known),
        h_score=h_score(records, lam, accepted_only=hscore_accepted_only),
        oscr=oscr(records, integration=integration),
        lam=lam,
        n_known=len(known),
        n_unknown=len(unknown),
    )


def export_embeddings(
    main: MainNetwork,
    x: np.ndarray,
    class_ids: np.ndarray,
    domain_ids: np.ndarray,
    unseen_class_ids: set[int],
    path: str | Path,
) -> None:
    """CSV of both branch embeddings per sample (raw values, no rendering)."""
    with ad.no_grad():
        out = main.forward(x)
    f1, f2 = out.f1.data, out.f2.data
    h = f1.shape[1]
    header = (["sample_id", "true_class", "domain", "is_unseen"]
              + [f"f1_{j}" for j in range(h)] + [f"f2_{j}" for j in range(h)])
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(header) + "\n")
        for i in range(x.shape[0]):
            row = [str(i), str(int(class_ids[i])), str(int(domain_ids[i])),
                   str(int(int(class_ids[i]) in unseen_class_ids))]
            row += [repr(float(v)) for v in f1[i]]
            row += [repr(float(v)) for v in f2[i]]
            f.write(",".join(row) + "\n")


def write_report(reports: list[EvalReport], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump([r.to_dict() for r in reports], f, indent=2, sort_keys=True)
        f.write("\n")


def write_predictions(records: list[PredictionRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("sample_id,head,true_class,predicted,confidence\n")
        for r in records:
            f.write(f"{r.sample_id},{r.head},{r.true_class},{r.predicted},{repr(r.confidence)}\n")
