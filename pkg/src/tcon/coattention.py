"""Cross-domain co-attention between segment-feature sequences.

Per video, a leave-one-out self-attention score is softmaxed over segments.
Per (source, target) pair, the raw co-attention matrix is the outer product of
the two self-attention vectors times the cross inner-product matrix.  Row and
column sums of the raw matrix, averaged over each video's pairs, give the
ground-truth attention; the column-softmaxed matrix mixes source segments into
target-aligned source features.

The batched functions operate on :class:`~tcon.numerics.Tensor` stacks shaped
``(videos, K, d)`` and are differentiable.  The single-item functions wrap them
for one sequence or one pair.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import numerics as nx
from .numerics import ShapeError, Tensor

SOURCE = "source"
TARGET = "target"


class NoPairsError(ValueError):
    """A video has no co-attention pairs; use uniform attention for it instead."""


@dataclass
class FeatureSequence:
    video_id: int
    domain: str
    segments: np.ndarray
    label: int | None = None

    def __post_init__(self):
        seg = np.asarray(self.segments, dtype=np.float64)
        if seg.ndim != 2 or seg.shape[0] < 1 or seg.shape[1] < 1:
            raise ShapeError(f"segments must be a non-empty (K, d) array, got {seg.shape}")
        if not np.all(np.isfinite(seg)):
            raise ValueError(f"video {self.video_id}: non-finite segment features")
        if self.domain not in (SOURCE, TARGET):
            raise ValueError(f"domain must be 'source' or 'target', got {self.domain!r}")
        self.segments = seg

    @property
    def num_segments(self) -> int:
        return self.segments.shape[0]

    @property
    def dim(self) -> int:
        return self.segments.shape[1]


@dataclass
class AttentionVector:
    kind: str  # ss | tt | ground_truth_source | ground_truth_target | predicted_target
    weights: np.ndarray
    degenerate: bool = False
    pair_count: int | None = None


@dataclass
class CoAttentionMatrix:
    pair_id: int
    source_id: int
    target_id: int
    a_ss: np.ndarray
    a_tt: np.ndarray
    a_st: np.ndarray
    a_co_raw: np.ndarray
    a_co_colnorm: np.ndarray


@dataclass
class AlignedSequence:
    pair_id: int
    segments: np.ndarray
    concatenated: np.ndarray = field(init=False)

    def __post_init__(self):
        self.concatenated = self.segments.reshape(-1)


# ---------------------------------------------------------------- batched, differentiable


def loo_scores(f: np.ndarray) -> np.ndarray:
    """Leave-one-out mean inner product of each segment with the rest, ``(B, K)``."""
    k = f.shape[1]
    if k == 1:
        return np.zeros(f.shape[:2])
    gram = np.matmul(f, np.swapaxes(f, 1, 2))
    return (gram.sum(axis=2) - np.einsum("bjj->bj", gram)) / (k - 1)


def _loo_softmax_backward(f: np.ndarray, a: np.ndarray, g_a: np.ndarray) -> np.ndarray:
    k = f.shape[1]
    if k == 1:
        return np.zeros_like(f)
    g_r = a * (g_a - (g_a * a).sum(axis=1, keepdims=True))
    w = (g_r[:, :, None] + g_r[:, None, :]) / (k - 1)
    idx = np.arange(k)
    w[:, idx, idx] = 0.0
    return np.matmul(w, f)


def self_attention_batch(f: Tensor) -> Tensor:
    """Softmaxed leave-one-out self-attention for a ``(B, K, d)`` stack."""
    a = nx.softmax(Tensor(loo_scores(f.data)), axis=1).data
    return nx.record(a, (f,), lambda g: (_loo_softmax_backward(f.data, a, g),))


def _onehot(index: np.ndarray, n: int) -> np.ndarray:
    m = np.zeros((n, len(index)))
    m[index, np.arange(len(index))] = 1.0
    return m


def _chunks(n: int, threads: int) -> list[slice]:
    if threads <= 1 or n < 2 * threads:
        return [slice(0, n)]
    edges = np.linspace(0, n, threads + 1).astype(int)
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:])]


def _map_chunks(fn, n: int, threads: int):
    parts = _chunks(n, threads)
    if len(parts) == 1:
        return [fn(parts[0])]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, parts))


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("TCON_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class CoAttentionBatch:
    """Co-attention for ``P`` pairs drawn from a source and a target stack."""

    source_index: np.ndarray
    target_index: np.ndarray
    raw: Tensor  # (P, Ks, Kt)
    colnorm: Tensor  # (P, Ks, Kt)
    a_ss: np.ndarray  # (Bs, Ks)
    a_tt: np.ndarray  # (Bt, Kt)
    a_st: np.ndarray  # (P, Ks, Kt)

    def __len__(self) -> int:
        return len(self.source_index)


def coattention_raw(fs: Tensor, ft: Tensor, si, ti, threads: int | None = None,
                    backend: str | None = None) -> tuple[Tensor, np.ndarray, np.ndarray, np.ndarray]:
    """Fused raw co-attention for pairs ``(si[p], ti[p])``.

    Returns ``(raw, a_ss, a_tt, a_st)``; only ``raw`` carries gradients (into
    both feature stacks, through the self-attention factors as well).
    """
    if fs.ndim != 3 or ft.ndim != 3:
        raise ShapeError(f"feature stacks must be (B, K, d), got {fs.shape} and {ft.shape}")
    if fs.shape[2] != ft.shape[2]:
        raise ShapeError(f"feature dimension mismatch: {fs.shape} vs {ft.shape}")
    si = np.asarray(si, dtype=np.intp)
    ti = np.asarray(ti, dtype=np.intp)
    if len(si) != len(ti):
        raise ShapeError("source and target pair indices differ in length")
    threads = default_threads() if threads is None else threads
    fsd, ftd = fs.data, ft.data
    a_ss = nx._softmax(loo_scores(fsd), axis=1)
    a_tt = nx._softmax(loo_scores(ftd), axis=1)

    parts = _map_chunks(
        lambda sl: kernels.pair_forward(fsd, ftd, a_ss, a_tt, si[sl], ti[sl], backend=backend),
        len(si), threads)
    a_st = np.concatenate([p[0] for p in parts]) if len(parts) > 1 else parts[0][0]
    raw = np.concatenate([p[1] for p in parts]) if len(parts) > 1 else parts[0][1]

    def backward(g):
        pieces = _map_chunks(
            lambda sl: kernels.pair_backward(fsd, ftd, a_ss, a_tt, si[sl], ti[sl], a_st[sl], g[sl],
                                             backend=backend),
            len(si), threads)
        g_fs_p, g_ft_p, g_u, g_v = (np.concatenate(x) for x in zip(*pieces))
        ms = _onehot(si, fsd.shape[0])
        mt = _onehot(ti, ftd.shape[0])
        g_fs = (ms @ g_fs_p.reshape(len(si), -1)).reshape(fsd.shape)
        g_ft = (mt @ g_ft_p.reshape(len(ti), -1)).reshape(ftd.shape)
        g_fs += _loo_softmax_backward(fsd, a_ss, ms @ g_u)
        g_ft += _loo_softmax_backward(ftd, a_tt, mt @ g_v)
        return g_fs, g_ft

    return nx.record(raw, (fs, ft), backward), a_ss, a_tt, a_st


def l2_normalize(f: Tensor, eps: float = 1e-12) -> Tensor:
    norm = nx.sqrt(nx.sum(f * f, axis=-1, keepdims=True) + eps)
    return f / norm


def coattention_batch(fs: Tensor, ft: Tensor, si, ti, *, normalize: bool = False,
                      stop_gradient: bool = False, threads: int | None = None,
                      backend: str | None = None) -> CoAttentionBatch:
    if stop_gradient:
        fs, ft = nx.detach(fs), nx.detach(ft)
    if normalize:
        fs, ft = l2_normalize(fs), l2_normalize(ft)
    raw, a_ss, a_tt, a_st = coattention_raw(fs, ft, si, ti, threads=threads, backend=backend)
    colnorm = nx.softmax(raw, axis=1)
    return CoAttentionBatch(np.asarray(si, dtype=np.intp), np.asarray(ti, dtype=np.intp),
                            raw, colnorm, a_ss, a_tt, a_st)


def normalize_attention(x: Tensor) -> Tensor:
    """Clamp to nonnegative and rescale each row to sum 1; all-zero rows become uniform."""
    x = nx.relu(x)
    total = x.data.sum(axis=1, keepdims=True)
    empty = (total <= 0.0).astype(np.float64)
    return x / (nx.sum(x, axis=1, keepdims=True) + empty) + empty / x.shape[1]


def ground_truth_batch(batch: CoAttentionBatch, side: str, num_videos: int) -> tuple[Tensor, np.ndarray]:
    """Ground-truth attention for every video on one side.

    Returns ``(weights (num_videos, K), pair_counts)``.  Rows of videos without
    pairs are uniform; check ``pair_counts`` to tell them apart.
    """
    if side == SOURCE:
        per_pair, index = nx.sum(batch.raw, axis=2), batch.source_index
    elif side == TARGET:
        per_pair, index = nx.sum(batch.raw, axis=1), batch.target_index
    else:
        raise ValueError(f"side must be 'source' or 'target', got {side!r}")
    counts = np.bincount(index, minlength=num_videos)
    summed = nx.segment_sum(per_pair, index, num_videos)
    avg = summed / np.maximum(counts, 1)[:, None].astype(np.float64)
    return normalize_attention(avg), counts


def aligned_batch(batch: CoAttentionBatch, fs: Tensor) -> Tensor:
    """Target-aligned source features ``(P, Kt, d)``: column-weighted source segments."""
    return nx.matmul(nx.swapaxes(batch.colnorm, 1, 2), nx.take(fs, batch.source_index))


# ---------------------------------------------------------------- single item


def _stack(seq: FeatureSequence) -> Tensor:
    return Tensor(seq.segments[None])


def self_attention(seq: FeatureSequence) -> AttentionVector:
    kind = "ss" if seq.domain == SOURCE else "tt"
    if seq.num_segments == 1:
        return AttentionVector(kind, np.ones(1), degenerate=True)
    return AttentionVector(kind, self_attention_batch(_stack(seq)).data[0])


def cross_similarity(src: FeatureSequence, tgt: FeatureSequence) -> np.ndarray:
    if src.dim != tgt.dim:
        raise ShapeError(f"feature dimension mismatch: {src.dim} vs {tgt.dim}")
    return src.segments @ tgt.segments.T


def coattention_matrix(src: FeatureSequence, tgt: FeatureSequence, pair_id: int = 0,
                       normalize: bool = False) -> CoAttentionMatrix:
    if src.dim != tgt.dim:
        raise ShapeError(f"feature dimension mismatch: {src.dim} vs {tgt.dim}")
    b = coattention_batch(_stack(src), _stack(tgt), [0], [0], normalize=normalize, threads=1)
    return CoAttentionMatrix(pair_id, src.video_id, tgt.video_id, b.a_ss[0], b.a_tt[0],
                             b.a_st[0], b.raw.data[0], b.colnorm.data[0])


def ground_truth_attention(pairs: list[CoAttentionMatrix], video_id: int, side: str) -> AttentionVector:
    if side == SOURCE:
        rows = [p.a_co_raw.sum(axis=1) for p in pairs if p.source_id == video_id]
    elif side == TARGET:
        rows = [p.a_co_raw.sum(axis=0) for p in pairs if p.target_id == video_id]
    else:
        raise ValueError(f"side must be 'source' or 'target', got {side!r}")
    if not rows:
        raise NoPairsError(f"{side} video {video_id} has no pairs; fall back to uniform attention")
    avg = np.mean(rows, axis=0)
    weights = normalize_attention(Tensor(avg[None])).data[0]
    return AttentionVector(f"ground_truth_{side}", weights, pair_count=len(rows))


def target_aligned_features(pair: CoAttentionMatrix, src: FeatureSequence) -> AlignedSequence:
    if pair.source_id != src.video_id:
        raise ValueError(f"pair {pair.pair_id} references source {pair.source_id}, not {src.video_id}")
    if pair.a_co_colnorm.shape[0] != src.num_segments:
        raise ShapeError(f"co-attention has {pair.a_co_colnorm.shape[0]} rows for "
                         f"{src.num_segments} source segments")
    return AlignedSequence(pair.pair_id, pair.a_co_colnorm.T @ src.segments)


def concat_video_feature(seq: FeatureSequence) -> np.ndarray:
    return seq.segments.reshape(-1).copy()
