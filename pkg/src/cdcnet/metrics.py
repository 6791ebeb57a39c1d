"""APCER / BPCER / ACER, threshold selection, and sub-protocol aggregation.

Live (bona fide) samples are the positive class: a spoof accepted as live is
a false positive.  A score at or above the threshold is predicted live.
"""
from __future__ import annotations

import csv
import json
import statistics
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LIVE, SPOOF = "live", "spoof"


class DegenerateProtocolError(ValueError):
    """A metric needs both classes but only one is present."""


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class ProtocolMetrics:
    apcer: float
    bpcer: float
    acer: float
    threshold: float = 0.5
    sub_protocol: str = ""

    def as_percent(self) -> dict:
        return {
            "sub_protocol": self.sub_protocol,
            "threshold": self.threshold,
            "APCER": pct(self.apcer),
            "BPCER": pct(self.bpcer),
            "ACER": pct(self.acer),
        }


def pct(fraction: float) -> float:
    return round(100.0 * fraction, 2)


def _is_live(label) -> bool:
    if label in (LIVE, 1, True):
        return True
    if label in (SPOOF, 0, False):
        return False
    raise ValueError(f"unknown label {label!r}")


def confusion(scores: Iterable[tuple[float, str]], threshold: float) -> ConfusionCounts:
    tp = tn = fp = fn = 0
    n = 0
    for score, label in scores:
        n += 1
        accepted = score >= threshold
        if _is_live(label):
            tp, fn = (tp + 1, fn) if accepted else (tp, fn + 1)
        else:
            fp, tn = (fp + 1, tn) if accepted else (fp, tn + 1)
    if n == 0:
        raise ValueError("cannot tally an empty score list")
    return ConfusionCounts(tp, tn, fp, fn)


def compute_metrics(c: ConfusionCounts, threshold: float = 0.5, sub_protocol: str = "") -> ProtocolMetrics:
    if c.tn + c.fp == 0:
        raise DegenerateProtocolError("no attack samples: APCER is undefined")
    if c.fn + c.tp == 0:
        raise DegenerateProtocolError("no bona fide samples: BPCER is undefined")
    apcer = c.fp / (c.tn + c.fp)
    bpcer = c.fn / (c.fn + c.tp)
    return ProtocolMetrics(apcer, bpcer, (apcer + bpcer) / 2, threshold, sub_protocol)


def aggregate(sub_results: Sequence[ProtocolMetrics | float]) -> tuple[float, float]:
    """Mean and sample (n - 1) standard deviation of ACER across sub-protocols."""
    values = [r.acer if isinstance(r, ProtocolMetrics) else float(r) for r in sub_results]
    if len(values) < 2:
        raise ValueError(f"aggregation needs at least 2 sub-protocols, got {len(values)}")
    return statistics.mean(values), statistics.stdev(values)


def candidate_thresholds(scores: Sequence[float]) -> list[float]:
    """0, 1, and the midpoints between adjacent distinct scores, ascending."""
    u = np.unique(np.asarray(scores, dtype=np.float64))
    mids = (u[:-1] + u[1:]) / 2.0
    return sorted(set(mids.tolist()) | {0.0, 1.0})


def select_threshold(dev_scores: Sequence[tuple[float, str]], policy="fixed") -> float:
    """Pick a decision threshold.

    ``policy`` is ``"min_acer"``, ``"eer"``, ``"fixed"`` (0.5), ``"fixed:<t>"``,
    ``("fixed", t)``, or a bare number.  Ties go to the lowest threshold.
    """
    kind, value = parse_policy(policy)
    if kind == "fixed":
        return value
    labels = [_is_live(lab) for _, lab in dev_scores]
    if all(labels) or not any(labels):
        raise DegenerateProtocolError("threshold selection needs both live and spoof samples")
    best_t, best_v = None, None
    for t in candidate_thresholds([s for s, _ in dev_scores]):
        m = compute_metrics(confusion(dev_scores, t), t)
        v = m.acer if kind == "min_acer" else abs(m.apcer - m.bpcer)
        if best_v is None or v < best_v:
            best_t, best_v = t, v
    return best_t


def parse_policy(policy) -> tuple[str, float]:
    if isinstance(policy, (int, float)):
        return "fixed", float(policy)
    if isinstance(policy, tuple):
        return policy[0], float(policy[1]) if len(policy) > 1 else 0.5
    text = str(policy).strip().lower()
    if text in ("min_acer", "eer"):
        return text, float("nan")
    if text == "fixed":
        return "fixed", 0.5
    if text.startswith("fixed:") or text.startswith("fixed="):
        return "fixed", float(text[6:])
    try:
        return "fixed", float(text)
    except ValueError:
        raise ValueError(f"unknown threshold policy {policy!r}") from None


# reports -----------------------------------------------------------------

SCORE_HEADER = ["sample_id", "sub_protocol", "label", "score"]


@dataclass(frozen=True)
class ScoreRow:
    sample_id: str
    sub_protocol: str
    label: str
    score: float


def write_scores(rows: Iterable[ScoreRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCORE_HEADER)
        for r in rows:
            w.writerow([r.sample_id, r.sub_protocol, r.label, repr(float(r.score))])


def read_scores(path) -> list[ScoreRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SCORE_HEADER:
            raise ValueError(f"{path}: expected header {','.join(SCORE_HEADER)}, got {reader.fieldnames}")
        return [ScoreRow(r["sample_id"], r["sub_protocol"], r["label"], float(r["score"])) for r in reader]


def protocol_report(rows: Sequence[ScoreRow], threshold: float, sub_protocols=None) -> dict:
    """Per-sub-protocol metrics plus the overall ACER mean and std, in percent."""
    tags = sorted({r.sub_protocol for r in rows}) if sub_protocols is None else list(sub_protocols)
    per = []
    for tag in tags:
        subset = [(r.score, r.label) for r in rows if r.sub_protocol == tag]
        if not subset:
            continue
        per.append(compute_metrics(confusion(subset, threshold), threshold, tag))
    report = {
        "threshold": threshold,
        "num_samples": len(rows),
        "sub_protocols": [m.as_percent() for m in per],
    }
    if len(per) >= 2:
        mean, std = aggregate(per)
        report["overall"] = {"ACER_mean": pct(mean), "ACER_std": pct(std)}
    elif per:
        report["overall"] = {"ACER_mean": pct(per[0].acer), "ACER_std": None}
    all_m = compute_metrics(confusion([(r.score, r.label) for r in rows], threshold), threshold, "all")
    report["pooled"] = all_m.as_percent()
    return report


def write_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=2) + "\n")


def format_report(report: dict) -> str:
    lines = [f"threshold {report['threshold']:.4f}"]
    for m in report["sub_protocols"]:
        lines.append(
            f"{m['sub_protocol']:>6}  APCER {m['APCER']:6.2f}%  BPCER {m['BPCER']:6.2f}%  ACER {m['ACER']:6.2f}%"
        )
    ov = report.get("overall")
    if ov and ov["ACER_std"] is not None:
        lines.append(f"overall ACER {ov['ACER_mean']:.2f} +- {ov['ACER_std']:.2f}%")
    return "\n".join(lines)
