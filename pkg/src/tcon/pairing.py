"""Soft-label pairing of source and target videos within a mini-batch."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class PairSet:
    source_index: np.ndarray  # batch positions
    target_index: np.ndarray
    similarity: np.ndarray
    source_ids: np.ndarray  # video ids, aligned with the batch positions
    target_ids: np.ndarray
    source_counts: np.ndarray  # pairs per source video in the batch
    target_counts: np.ndarray
    batch_id: int = 0

    def __len__(self) -> int:
        return len(self.source_index)

    def pairs(self) -> list[tuple[int, int, float]]:
        return [(int(self.source_ids[i]), int(self.target_ids[j]), float(s))
                for i, j, s in zip(self.source_index, self.target_index, self.similarity)]


def soft_label_similarity(p, q) -> float:
    """Cosine similarity of two class-probability vectors, negatives clamped to 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(p) * np.linalg.norm(q)
    if norm == 0.0:
        raise ValueError("soft-label similarity is undefined for a zero vector")
    return float(max(0.0, np.dot(p, q) / norm))


def similarity_matrix(source_probs: np.ndarray, target_probs: np.ndarray) -> np.ndarray:
    sp = np.asarray(source_probs, dtype=np.float64)
    tp = np.asarray(target_probs, dtype=np.float64)
    ns = np.linalg.norm(sp, axis=1)
    nt = np.linalg.norm(tp, axis=1)
    if np.any(ns == 0) or np.any(nt == 0):
        raise ValueError("soft-label similarity is undefined for a zero vector")
    return np.maximum(0.0, (sp @ tp.T) / np.outer(ns, nt))


def select_pairs(source_probs, target_probs, threshold: float = 0.5, top_m: int = 2,
                 source_ids=None, target_ids=None, batch_id: int = 0) -> PairSet:
    """All cross pairs with similarity >= ``threshold``; unpaired targets get their
    ``top_m`` most similar sources (ties to the smaller source id)."""
    sim = similarity_matrix(source_probs, target_probs)
    n_s, n_t = sim.shape
    if n_s == 0 or n_t == 0:
        raise ValueError("pairing needs non-empty source and target batches")
    source_ids = np.arange(n_s) if source_ids is None else np.asarray(source_ids)
    target_ids = np.arange(n_t) if target_ids is None else np.asarray(target_ids)
    keep = sim >= threshold
    m = min(int(top_m), n_s)
    for j in np.flatnonzero(~keep.any(axis=0)):
        order = np.lexsort((source_ids, -sim[:, j]))
        keep[order[:m], j] = True
    si, ti = np.nonzero(keep)
    return PairSet(
        source_index=si.astype(np.intp),
        target_index=ti.astype(np.intp),
        similarity=sim[si, ti],
        source_ids=source_ids,
        target_ids=target_ids,
        source_counts=np.bincount(si, minlength=n_s),
        target_counts=np.bincount(ti, minlength=n_t),
        batch_id=batch_id,
    )
