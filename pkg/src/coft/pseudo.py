"""Pseudo-label bookkeeping: zero-shot inference, argmax assignment,
per-class top-K selection, and the record set shared by both training phases.

Ground-truth labels may be attached for evaluation, but every training-facing
accessor (``training_view``) excludes them by construction; no training or
filtering decision can read them.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .core import as_f64, softmax_rows
from .errors import ContractError, DomainError, ShapeError
from .encoders import FrozenProvider

__all__ = [
    "GENERATORS",
    "STATUSES",
    "PseudoLabelRecord",
    "PseudoLabelSet",
    "class_probabilities",
    "zero_shot_probs",
    "assign_pseudo_labels",
    "select_top_k",
]

GENERATORS = ("zeroshot", "model1", "model2")
STATUSES = ("unassigned", "candidate", "clean", "noise")

_TRANSITIONS = {
    "unassigned": {"candidate"},
    "candidate": {"clean", "noise"},
    "clean": set(),
    "noise": set(),
}

_NORM_TOL = 1e-9


@dataclass
class PseudoLabelRecord:
    sample_id: int
    label: int
    confidence: float
    generator: str
    status: str = "candidate"
    ground_truth: int | None = None  # evaluation only


class PseudoLabelSet:
    """Ordered set of pseudo-label records, one per sample."""

    def __init__(self, records):
        self._records: dict[int, PseudoLabelRecord] = {}
        for r in records:
            if r.generator not in GENERATORS:
                raise ContractError(f"unknown generator {r.generator!r}")
            if r.status not in STATUSES:
                raise ContractError(f"unknown status {r.status!r}")
            if r.sample_id in self._records:
                raise ContractError(f"duplicate sample_id {r.sample_id}")
            self._records[r.sample_id] = r

    def __len__(self):
        return len(self._records)

    def __iter__(self):
        return iter(self._records.values())

    def __contains__(self, sample_id):
        return sample_id in self._records

    def get(self, sample_id: int) -> PseudoLabelRecord:
        try:
            return self._records[sample_id]
        except KeyError:
            raise KeyError(f"unknown sample_id {sample_id}") from None

    def sample_ids(self) -> np.ndarray:
        return np.array([r.sample_id for r in self], dtype=np.int64)

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self], dtype=np.int64)

    def training_view(self):
        """(sample_ids, labels, confidences) — ground truth is not reachable here."""
        ids = self.sample_ids()
        labels = self.labels()
        conf = np.array([r.confidence for r in self], dtype=np.float64)
        return ids, labels, conf

    def mark(self, sample_id: int, new_status: str) -> None:
        r = self.get(sample_id)
        if new_status not in _TRANSITIONS.get(r.status, set()):
            raise ContractError(
                f"illegal status transition {r.status!r} -> {new_status!r} "
                f"for sample {sample_id}"
            )
        r.status = new_status

    def subset(self, sample_ids) -> "PseudoLabelSet":
        return PseudoLabelSet([replace(self.get(i)) for i in sample_ids])

    def with_status(self, status: str) -> "PseudoLabelSet":
        return PseudoLabelSet([replace(r) for r in self if r.status == status])

    def attach_ground_truth(self, truth) -> None:
        """Evaluation only: record the true label of every known sample."""
        truth = np.asarray(truth)
        for r in self:
            r.ground_truth = int(truth[r.sample_id])

    def accuracy(self, truth=None) -> float:
        """Fraction of records whose label matches ground truth (NaN if empty)."""
        if len(self) == 0:
            return float("nan")
        if truth is not None:
            hits = sum(1 for r in self if r.label == int(truth[r.sample_id]))
        else:
            if any(r.ground_truth is None for r in self):
                raise ContractError("ground truth not attached")
            hits = sum(1 for r in self if r.label == r.ground_truth)
        return hits / len(self)

    def save(self, path, with_truth: bool = False) -> None:
        """Line-delimited records; ground truth withheld unless ``with_truth``."""
        with open(path, "w", encoding="utf-8") as f:
            for r in self:
                rec = {
                    "sample_id": r.sample_id,
                    "label": r.label,
                    "confidence": r.confidence,
                    "generator": r.generator,
                    "status": r.status,
                }
                if with_truth:
                    rec["ground_truth"] = r.ground_truth
                f.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "PseudoLabelSet":
        records = []
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                d = json.loads(line)
                records.append(
                    PseudoLabelRecord(
                        sample_id=int(d["sample_id"]),
                        label=int(d["label"]),
                        confidence=float(d["confidence"]),
                        generator=d["generator"],
                        status=d["status"],
                        ground_truth=d.get("ground_truth"),
                    )
                )
        return cls(records)


def class_probabilities(embeddings, text_embeddings, tau: float) -> np.ndarray:
    """Row-wise class distribution: softmax of cosine similarities over tau.

    Both tables must hold unit-norm rows, so the cosine reduces to a dot
    product.
    """
    emb = as_f64(embeddings)
    texts = as_f64(text_embeddings)
    if emb.ndim != 2 or texts.ndim != 2 or emb.shape[1] != texts.shape[1]:
        raise ShapeError(
            f"incompatible shapes {emb.shape} vs {texts.shape} for class probabilities"
        )
    if np.any(np.abs(np.linalg.norm(texts, axis=1) - 1.0) > _NORM_TOL):
        raise DomainError("text embeddings must be unit-norm")
    return softmax_rows(emb @ texts.T, tau)


def zero_shot_probs(provider: FrozenProvider, sample_id: int, tau: float,
                    text_embeddings) -> np.ndarray:
    """Class distribution of one sample against the given text embeddings."""
    emb = provider.embedding(sample_id)
    return class_probabilities(emb[None, :], text_embeddings, tau)[0]


def assign_pseudo_labels(probs, sample_ids=None, generator: str = "zeroshot",
                         ) -> PseudoLabelSet:
    """Argmax labels with max-probability confidences; ties take the lowest class.

    ``probs`` is (n, C) with rows summing to 1; resulting records start in
    status ``candidate``.
    """
    p = as_f64(probs)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ContractError(f"expected a nonempty (n, C) probability table, got {p.shape}")
    if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise ContractError("probability rows must sum to 1")
    if sample_ids is None:
        sample_ids = np.arange(p.shape[0])
    labels = np.argmax(p, axis=1)  # np.argmax already breaks ties low
    conf = p[np.arange(p.shape[0]), labels]
    return PseudoLabelSet(
        [
            PseudoLabelRecord(
                sample_id=int(sid),
                label=int(lab),
                confidence=float(cf),
                generator=generator,
            )
            for sid, lab, cf in zip(sample_ids, labels, conf)
        ]
    )


def select_top_k(labels: PseudoLabelSet, k: int, num_classes: int) -> PseudoLabelSet:
    """Per class, the K highest-confidence candidates (all of them if fewer).

    Deterministic order: class ascending, then confidence descending, then
    sample_id ascending. Classes with no candidates contribute nothing and a
    warning is recorded.
    """
    if k < 1:
        raise DomainError(f"K must be >= 1, got {k}")
    by_class: dict[int, list[PseudoLabelRecord]] = {c: [] for c in range(num_classes)}
    for r in labels:
        if r.status != "candidate":
            continue
        if not 0 <= r.label < num_classes:
            raise ContractError(f"label {r.label} out of range for {num_classes} classes")
        by_class[r.label].append(r)
    selected = []
    for c in range(num_classes):
        group = sorted(by_class[c], key=lambda r: (-r.confidence, r.sample_id))
        if not group:
            warnings.warn(f"class {c} has no pseudo-label candidates; top-K skips it")
        selected.extend(replace(r) for r in group[:k])
    return PseudoLabelSet(selected)
