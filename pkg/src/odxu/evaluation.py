"""Metrics and reporting.

Scenario quality is summarized by six numbers: multiclass accuracy, binary
(benign-vs-attack) accuracy, miss rate on attacks, false omission rate,
attack-class F1, and competence (binary accuracy restricted to samples the
uncertainty layer trusts).  Uncertainty scores themselves are judged by
AUROC and the true-positive rate at a pinned true-negative rate.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

logger = logging.getLogger(__name__)

REPORT_SCHEMA = "odxu-report/1"


@dataclass(frozen=True)
class ConfusionSummary:
    """Multiclass confusion counts plus their benign/attack collapse.

    ``per_class[true][predicted]`` holds raw counts.  The binary counts
    treat every non-benign class as positive: an attack predicted as any
    attack class (even the wrong one) is still a true positive.
    """

    per_class: dict = field(repr=False)
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_predictions(cls, preds, labels, benign_class: str) -> "ConfusionSummary":
        preds = np.asarray(preds).astype(str)
        labels = np.asarray(labels).astype(str)
        if len(preds) == 0:
            raise ValueError("empty input")
        if len(preds) != len(labels):
            raise ValueError("preds and labels must align")
        if benign_class not in set(labels):
            raise ValueError(f"benign class {benign_class!r} absent from label space")
        per_class: dict = {}
        for t, p in zip(labels, preds):
            per_class.setdefault(t, {}).setdefault(p, 0)
            per_class[t][p] += 1
        label_is_attack = labels != benign_class
        pred_is_attack = preds != benign_class
        return cls(
            per_class=per_class,
            tp=int(np.sum(label_is_attack & pred_is_attack)),
            fp=int(np.sum(~label_is_attack & pred_is_attack)),
            tn=int(np.sum(~label_is_attack & ~pred_is_attack)),
            fn=int(np.sum(label_is_attack & ~pred_is_attack)),
        )

    def as_dict(self) -> dict:
        return {"per_class": self.per_class, "tp": self.tp, "fp": self.fp,
                "tn": self.tn, "fn": self.fn}


def _safe_div(a: float, b: float) -> float:
    return a / b if b else 0.0


def classification_metrics(preds, labels, benign_class: str, *,
                           z=None, z_threshold: float = 0.5) -> dict:
    """The six scenario metrics plus the confusion summary backing them.

    misclassified_positive_rate = FN / (FN + TP), the fraction of attacks
    waved through as benign; false_omission_rate = FN / (FN + TN), attacks
    among everything predicted benign; f1_attack is the harmonic mean of
    precision and recall on the collapsed attack class.  Ratios with an
    empty denominator report 0.  competence is the binary accuracy over
    samples whose uncertainty score z sits below ``z_threshold``; it is
    emitted only when z is supplied (None when no sample qualifies).
    """
    preds = np.asarray(preds).astype(str)
    labels = np.asarray(labels).astype(str)
    summary = ConfusionSummary.from_predictions(preds, labels, benign_class)

    tp, fp, tn, fn = summary.tp, summary.fp, summary.tn, summary.fn
    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    metrics = {
        "multiclass_accuracy": float(np.mean(preds == labels)),
        "binary_accuracy": _safe_div(tp + tn, summary.total),
        "misclassified_positive_rate": _safe_div(fn, fn + tp),
        "false_omission_rate": _safe_div(fn, fn + tn),
        "f1_attack": _safe_div(2 * precision * recall, precision + recall),
        "confusion": summary.as_dict(),
    }
    if z is not None:
        z = np.asarray(z, dtype=np.float64)
        if len(z) != len(preds):
            raise ValueError("z must align with predictions")
        trusted = z < z_threshold
        if trusted.any():
            t_attack = labels[trusted] != benign_class
            p_attack = preds[trusted] != benign_class
            metrics["competence"] = float(np.mean(t_attack == p_attack))
        else:
            metrics["competence"] = None
        metrics["competence_threshold"] = float(z_threshold)
    return metrics


def auroc(scores, labels) -> float:
    """Probability a positive outranks a negative, ties counted half.

    Rank-sum formulation with midrank tie correction; equals the O(n^2)
    pairwise count exactly.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need both classes to compute AUROC")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def tp_at_tn(scores, labels, tn_target: float = 0.95) -> float:
    """True-positive rate at the loosest cut that protects negatives.

    A sample is flagged positive when its score is >= the threshold.  The
    threshold is the smallest candidate (unique score values plus +inf)
    whose true-negative rate reaches ``tn_target``; returns the TPR there.
    """
    if not (0.0 < tn_target <= 1.0):
        raise ValueError("tn_target must lie in (0, 1]")
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    pos_scores = scores[labels == 1]
    neg_scores = scores[labels == 0]
    if len(pos_scores) == 0 or len(neg_scores) == 0:
        raise ValueError("need both classes to compute TP@TN")
    candidates = np.concatenate([np.unique(scores), [np.inf]])
    for t in candidates:
        tnr = np.mean(neg_scores < t)
        if tnr >= tn_target:
            return float(np.mean(pos_scores >= t))
    return 0.0


@dataclass(frozen=True)
class RocCurve:
    """(score, label) pairs sorted by descending score, with the AUROC."""

    pairs: tuple
    auroc: float

    @classmethod
    def from_scores(cls, scores, labels) -> "RocCurve":
        scores = np.asarray(scores, dtype=np.float64)
        labels = np.asarray(labels).astype(np.int64)
        order = np.argsort(-scores, kind="stable")
        pairs = tuple((float(scores[i]), int(labels[i])) for i in order)
        return cls(pairs=pairs, auroc=auroc(scores, labels))


def osr_eval(meta, base, X_known, X_unknown, *, seed: int = 0,
             tn_target: float = 0.95) -> dict:
    """Open-set check: can the error score separate unseen-class traffic?

    Builds a balanced pool with equal counts of knowns (label 0) and
    unknowns (label 1), subsampling the larger side under ``seed``, scores
    everything with the metamodel, and reports AUROC and TP@TN.
    """
    X_known = np.asarray(X_known, dtype=np.float64)
    X_unknown = np.asarray(X_unknown, dtype=np.float64)
    if len(X_unknown) == 0:
        raise ValueError("unknown set is empty")
    if len(X_unknown) < 10:
        logger.warning(
            "open-set evaluation with only %d unknown samples (%d knowns); "
            "results will be unstable", len(X_unknown), len(X_known),
        )
    rng = np.random.default_rng(seed)
    n = min(len(X_known), len(X_unknown))
    known_idx = rng.choice(len(X_known), size=n, replace=False)
    unknown_idx = rng.choice(len(X_unknown), size=n, replace=False)
    X_pool = np.vstack([X_known[known_idx], X_unknown[unknown_idx]])
    y_pool = np.concatenate([np.zeros(n, dtype=np.int64), np.ones(n, dtype=np.int64)])
    z = meta.score_samples(base, X_pool)
    return {
        "auroc": auroc(z, y_pool),
        "tp_at_tn": tp_at_tn(z, y_pool, tn_target),
        "tn_target": tn_target,
        "n_known": int(n),
        "n_unknown": int(n),
    }


# --- report emission ---------------------------------------------------------

def _jsonify(value):
    if isinstance(value, dict):
        return {str(k): _jsonify(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonify(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonify(v) for v in value.tolist()]
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    return value


def _is_empty(section) -> bool:
    return section is None or (hasattr(section, "__len__") and len(section) == 0)


def format_cell(value) -> str:
    """Numbers in the tables use the compact 4-decimal style (".9845")."""
    if isinstance(value, bool) or value is None:
        return str(value)
    if isinstance(value, float):
        s = f"{value:.4f}"
        if s.startswith("0."):
            s = s[1:]
        elif s.startswith("-0."):
            s = "-" + s[2:]
        return s
    return str(value)


def format_table(headers: list, rows: list) -> str:
    cells = [[format_cell(v) for v in row] for row in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h)
              for i, h in enumerate(headers)]
    def line(parts):
        return "  ".join(p.ljust(w) for p, w in zip(parts, widths)).rstrip()
    out = [line(headers), line(["-" * w for w in widths])]
    out.extend(line(r) for r in cells)
    return "\n".join(out)


def render_text_report(report: dict) -> str:
    blocks = []
    for name, section in report.items():
        if name == "schema" or _is_empty(section):
            continue
        title = name.replace("_", " ")
        if isinstance(section, list) and section and isinstance(section[0], dict):
            headers = list(section[0].keys())
            rows = [[row.get(h) for h in headers] for row in section]
            blocks.append(f"== {title} ==\n" + format_table(headers, rows))
        elif isinstance(section, dict):
            rows = [[k, v] for k, v in section.items() if not isinstance(v, (dict, list))]
            nested = {k: v for k, v in section.items() if isinstance(v, (dict, list))}
            body = format_table(["metric", "value"], rows) if rows else ""
            blocks.append(f"== {title} ==\n{body}".rstrip())
            for sub_name, sub in nested.items():
                if _is_empty(sub):
                    continue
                blocks.append(f"-- {title} / {sub_name.replace('_', ' ')} --\n"
                              + json.dumps(_jsonify(sub), sort_keys=True))
        else:
            blocks.append(f"== {title} ==\n{format_cell(section)}")
    return "\n\n".join(blocks) + "\n"


def emit_report(metrics: dict, json_path=None) -> str:
    """Write the versioned JSON report and return the human-readable text.

    Empty sections are dropped rather than serialized as nulls.  The JSON
    is emitted with sorted keys so identical metrics give identical bytes.
    """
    report = {"schema": REPORT_SCHEMA}
    for name, section in metrics.items():
        if _is_empty(section):
            continue
        report[name] = _jsonify(section)
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return render_text_report(report)
