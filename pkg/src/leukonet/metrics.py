"""Confusion-count metrics with Cancer as the positive class."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractError, DataError

REPORT_SCHEMA = 1


def f1_parts(tp: int, fp: int, fn: int) -> tuple[float, bool]:
    """(F1, degenerate). Degenerate means a zero denominator forced F1 = 0."""
    if min(tp, fp, fn) < 0:
        raise ContractError(f"counts must be non-negative, got tp={tp} fp={fp} fn={fn}")
    if tp == 0:
        return 0.0, True
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2.0 * precision * recall / (precision + recall), False


def f1_score(tp: int, fp: int, fn: int) -> float:
    return f1_parts(tp, fp, fn)[0]


def predict_labels(logits: np.ndarray) -> tuple[np.ndarray, int]:
    """Argmax over two logits; exact ties go to Normal (0). Returns (labels, tie count)."""
    logits = np.asarray(logits)
    if logits.ndim != 2 or logits.shape[1] != 2:
        raise ContractError(f"expected (n, 2) logits, got {logits.shape}")
    return (logits[:, 1] > logits[:, 0]).astype(np.int64), int(np.sum(logits[:, 1] == logits[:, 0]))


@dataclass
class MetricsReport:
    tp: int
    fp: int
    tn: int
    fn: int
    ties: int = 0
    loss: float | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_predictions(cls, y_true, y_pred, ties: int = 0, loss: float | None = None) -> "MetricsReport":
        y_true = np.asarray(y_true, dtype=np.int64)
        y_pred = np.asarray(y_pred, dtype=np.int64)
        if y_true.size == 0:
            raise ContractError("cannot evaluate an empty dataset")
        if y_true.shape != y_pred.shape:
            raise ContractError(f"{y_true.shape} labels against {y_pred.shape} predictions")
        return cls(
            tp=int(np.sum((y_true == 1) & (y_pred == 1))),
            fp=int(np.sum((y_true == 0) & (y_pred == 1))),
            tn=int(np.sum((y_true == 0) & (y_pred == 0))),
            fn=int(np.sum((y_true == 1) & (y_pred == 0))),
            ties=ties,
            loss=loss,
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total

    @property
    def f1_cancer(self) -> float:
        return f1_score(self.tp, self.fp, self.fn)

    @property
    def f1_normal(self) -> float:
        return f1_score(self.tn, self.fn, self.fp)

    @property
    def degenerate(self) -> dict:
        return {"f1_c": f1_parts(self.tp, self.fp, self.fn)[1], "f1_n": f1_parts(self.tn, self.fn, self.fp)[1]}

    def precision_recall(self) -> dict:
        def ratio(a, b):
            return a / b if b else 0.0

        return {
            "precision_c": ratio(self.tp, self.tp + self.fp),
            "recall_c": ratio(self.tp, self.tp + self.fn),
            "precision_n": ratio(self.tn, self.tn + self.fn),
            "recall_n": ratio(self.tn, self.tn + self.fp),
        }

    def to_text(self) -> str:
        """Key-value report: percentages to 2 decimals, then exact values and counts."""
        pr = self.precision_recall()
        lines = [
            f"schema = {REPORT_SCHEMA}",
            f"n = {self.total}",
            f"accuracy = {100 * self.accuracy:.2f}",
            f"f1_n = {100 * self.f1_normal:.2f}",
            f"f1_c = {100 * self.f1_cancer:.2f}",
        ]
        lines += [f"{k} = {100 * v:.2f}" for k, v in pr.items()]
        lines += [
            f"ties = {self.ties}",
            f"degenerate_f1_n = {str(self.degenerate['f1_n']).lower()}",
            f"degenerate_f1_c = {str(self.degenerate['f1_c']).lower()}",
        ]
        if self.loss is not None:
            lines.append(f"loss = {self.loss:.6f}")
        for k in sorted(self.meta):
            lines.append(f"meta.{k} = {self.meta[k]}")
        lines += [
            "[confusion]",
            "positive = Cancer",
            f"  tp = {self.tp}",
            f"  fp = {self.fp}",
            f"  tn = {self.tn}",
            f"  fn = {self.fn}",
            "[exact]",
            f"  accuracy = {self.accuracy!r}",
            f"  f1_n = {self.f1_normal!r}",
            f"  f1_c = {self.f1_cancer!r}",
        ]
        return "\n".join(lines) + "\n"

    @staticmethod
    def parse_text(text: str) -> dict:
        """Flatten a report back into {'section.key' or 'key': value string}."""
        out, section = {}, ""
        for raw in text.splitlines():
            line = raw.strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1] + "."
                continue
            if "=" not in line:
                raise DataError(f"malformed report line: {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            out[section + key] = value
        return out

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        d = cls.parse_text(text)
        if int(d.get("schema", -1)) != REPORT_SCHEMA:
            raise DataError(f"unsupported report schema {d.get('schema')}")
        loss = float(d["loss"]) if "loss" in d else None
        return cls(
            int(d["confusion.tp"]), int(d["confusion.fp"]), int(d["confusion.tn"]), int(d["confusion.fn"]),
            ties=int(d["ties"]), loss=loss,
        )
