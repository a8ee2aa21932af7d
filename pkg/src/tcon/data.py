"""Synthetic misaligned two-domain sequences and the FSEQ feature-file format.

A synthetic video is ``K`` segment vectors.  ``S`` consecutive segments carry
the class's ordered stage prototypes starting at a per-video offset; every
other segment is background (a per-video scene vector with probability
``background_prob``, otherwise empty).  Gaussian noise is added everywhere and
target videos also pass through an affine map.

FSEQ layout (little-endian)::

    b"FSEQ" | version u16 | count u32
    per video: id u32 | domain u8 | label i32 (-1 = unlabeled) | K u16 | d u16 | K*d f32
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .coattention import SOURCE, TARGET, FeatureSequence

MAGIC = b"FSEQ"
VERSION = 1
_HEADER = struct.Struct("<4sHI")
_RECORD = struct.Struct("<IBiHH")
_DOMAIN_CODES = {SOURCE: 0, TARGET: 1}
_DOMAIN_NAMES = {v: k for k, v in _DOMAIN_CODES.items()}


class FeatureFileError(ValueError):
    """Malformed feature file (bad magic, version or layout)."""


class TruncatedFileError(FeatureFileError):
    def __init__(self, expected: int, actual: int):
        super().__init__(f"truncated feature file: expected at least {expected} bytes, got {actual}")
        self.expected = expected
        self.actual = actual


class DimensionMismatchError(FeatureFileError):
    """Sequences in one file disagree on feature dimension."""


# ---------------------------------------------------------------- synthetic spec


@dataclass
class SyntheticSpec:
    num_classes: int = 4
    dim: int = 16
    k_source: int = 8
    k_target: int = 8
    num_stages: int = 4
    # inclusive offset ranges, relative to the centred stage block
    source_offsets: tuple[int, int] = (0, 0)
    target_offsets: tuple[int, int] = (-2, 2)
    affine_angle: float = 0.0
    affine_scale: float = 1.0
    # stretch factor applied inside a random affine_stretch_rank-dimensional subspace (None: dim // 2)
    affine_stretch: float = 3.0
    affine_stretch_rank: int | None = None
    affine_bias: float = 1.5
    affine_matrix: list | None = None
    affine_bias_vector: list | None = None
    background_prob: float = 1.0
    background_scale: float = 1.0
    noise_std: float = 0.2
    # global multiplier on every generated feature (both domains, before and after the affine map)
    signal_scale: float = 2.0
    videos_per_class: int = 100
    seed: int = 0
    prototypes: list | None = field(default=None, repr=False)

    def __post_init__(self):
        self.source_offsets = tuple(int(x) for x in self.source_offsets)
        self.target_offsets = tuple(int(x) for x in self.target_offsets)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown synthetic spec fields: {sorted(unknown)}")
        return cls(**known)

    @classmethod
    def from_json(cls, path) -> "SyntheticSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["source_offsets"] = list(self.source_offsets)
        d["target_offsets"] = list(self.target_offsets)
        return d

    def block_start(self, k: int) -> int:
        return (k - self.num_stages) // 2

    def validate(self) -> None:
        if self.num_classes < 2 or self.dim < 1 or self.videos_per_class < 1:
            raise ValueError("need >= 2 classes, dim >= 1 and >= 1 video per class")
        if self.num_stages < 1 or self.num_stages > min(self.k_source, self.k_target):
            raise ValueError(f"num_stages={self.num_stages} must be in [1, min(K_s, K_t)="
                             f"{min(self.k_source, self.k_target)}]")
        for name, k, (lo, hi) in (("source", self.k_source, self.source_offsets),
                                  ("target", self.k_target, self.target_offsets)):
            if lo > hi:
                raise ValueError(f"{name} offset range {lo}..{hi} is empty")
            base = self.block_start(k)
            if base + lo < 0 or base + hi + self.num_stages > k:
                raise ValueError(f"{name} offsets {lo}..{hi} push stages outside a {k}-segment video")
        if not 0.0 <= self.background_prob <= 1.0:
            raise ValueError("background_prob must be in [0, 1]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        if self.signal_scale <= 0 or self.affine_stretch <= 0:
            raise ValueError("signal_scale and affine_stretch must be positive")
        if self.affine_stretch_rank is not None and not 0 <= self.affine_stretch_rank <= self.dim:
            raise ValueError(f"affine_stretch_rank must be in [0, dim={self.dim}]")
        if self.prototypes is not None:
            p = np.asarray(self.prototypes, dtype=np.float64)
            if p.shape != (self.num_classes, self.num_stages, self.dim):
                raise ValueError(f"prototypes must be shaped {(self.num_classes, self.num_stages, self.dim)}")
            flat = p.reshape(self.num_classes, -1)
            for a in range(self.num_classes):
                for b in range(a + 1, self.num_classes):
                    if np.array_equal(flat[a], flat[b]):
                        raise ValueError(f"classes {a} and {b} share identical prototypes")


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def make_prototypes(spec: SyntheticSpec) -> np.ndarray:
    """Stage prototypes ``(C, S, d)``, unit vectors."""
    if spec.prototypes is not None:
        return np.asarray(spec.prototypes, dtype=np.float64)
    rng = np.random.default_rng([spec.seed, 1])
    return _unit_rows(rng, spec.num_classes * spec.num_stages, spec.dim).reshape(
        spec.num_classes, spec.num_stages, spec.dim)


def make_affine(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Target-domain map ``x -> x @ W.T + b`` on unit-scale features.

    ``W = scale * R @ S`` where ``S`` stretches a random ``affine_stretch_rank``-dim
    (default ``d // 2``) subspace by ``affine_stretch`` and ``R`` rotates by ``affine_angle`` within
    ``d // 2`` orthogonal planes; ``b`` has norm ``affine_bias`` and lies in the
    stretched subspace.
    """
    rng = np.random.default_rng([spec.seed, 2])
    d = spec.dim
    m = d // 2 if spec.affine_stretch_rank is None else spec.affine_stretch_rank
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    if spec.affine_matrix is not None:
        w = np.asarray(spec.affine_matrix, dtype=np.float64)
    else:
        stretch = np.eye(d) + (spec.affine_stretch - 1.0) * q[:, :m] @ q[:, :m].T
        rot = np.eye(d)
        c, s = np.cos(spec.affine_angle), np.sin(spec.affine_angle)
        for i in range(d // 2):
            u, v = q[:, 2 * i], q[:, 2 * i + 1]
            rot = rot + (c - 1.0) * (np.outer(u, u) + np.outer(v, v)) + s * (np.outer(v, u) - np.outer(u, v))
        w = spec.affine_scale * rot @ stretch
    if spec.affine_bias_vector is not None:
        b = np.asarray(spec.affine_bias_vector, dtype=np.float64)
    else:
        basis = q[:, :m] if m else q
        direction = basis @ rng.standard_normal(basis.shape[1])
        b = direction / np.linalg.norm(direction) * spec.affine_bias
    if w.shape != (d, d) or b.shape != (d,):
        raise ValueError(f"affine map must be ({d}, {d}) plus ({d},)")
    return w, b


def stage_starts(spec: SyntheticSpec, domain: str, rng: np.random.Generator, n: int) -> np.ndarray:
    k = spec.k_source if domain == SOURCE else spec.k_target
    lo, hi = spec.source_offsets if domain == SOURCE else spec.target_offsets
    return spec.block_start(k) + rng.integers(lo, hi + 1, size=n)


def _generate_domain(spec: SyntheticSpec, domain: str, protos: np.ndarray,
                     rng: np.random.Generator) -> tuple[list[FeatureSequence], np.ndarray]:
    k = spec.k_source if domain == SOURCE else spec.k_target
    n = spec.num_classes * spec.videos_per_class
    labels = np.repeat(np.arange(spec.num_classes), spec.videos_per_class)
    starts = stage_starts(spec, domain, rng, n)
    scenes = _unit_rows(rng, n, spec.dim) * spec.background_scale
    use_bg = rng.random((n, k)) < spec.background_prob
    noise = rng.standard_normal((n, k, spec.dim)) * spec.noise_std
    x = np.where(use_bg[:, :, None], scenes[:, None, :], 0.0)
    for v in range(n):
        x[v, starts[v]:starts[v] + spec.num_stages] = protos[labels[v]]
    x = x + noise
    if domain == TARGET:
        w, b = make_affine(spec)
        x = x @ w.T + b
    x = x * spec.signal_scale
    seqs = [FeatureSequence(v, domain, x[v], int(labels[v])) for v in range(n)]
    return seqs, starts


def generate(spec: SyntheticSpec, return_starts: bool = False):
    """Source and target datasets (lists of :class:`FeatureSequence`), labels on both.

    Target labels are for evaluation only.  With ``return_starts`` the per-video
    stage-block start positions are returned as a third and fourth item.
    """
    spec.validate()
    protos = make_prototypes(spec)
    src, s_starts = _generate_domain(spec, SOURCE, protos, np.random.default_rng([spec.seed, 3]))
    tgt, t_starts = _generate_domain(spec, TARGET, protos, np.random.default_rng([spec.seed, 4]))
    if return_starts:
        return src, tgt, s_starts, t_starts
    return src, tgt


def misalignment_statistic(src: FeatureSequence, tgt: FeatureSequence) -> float:
    """Mean |argmax column - row| of the cross-similarity matrix over rows."""
    ast = src.segments @ tgt.segments.T
    cols = np.argmax(ast, axis=1)
    return float(np.mean(np.abs(cols - np.arange(len(cols)))))


# ---------------------------------------------------------------- partitioning


def partition_segments(frames, k: int, video_id: int = 0, domain: str = SOURCE,
                       label: int | None = None) -> FeatureSequence:
    """Average ``T`` frame vectors into ``k`` contiguous chunks; earlier chunks take the remainder."""
    frames = np.asarray(frames, dtype=np.float64)
    t = frames.shape[0]
    if k < 1 or t < k:
        raise ValueError(f"cannot split {t} frames into {k} segments")
    base, extra = divmod(t, k)
    sizes = [base + 1 if i < extra else base for i in range(k)]
    edges = np.concatenate([[0], np.cumsum(sizes)])
    segs = np.stack([frames[a:b].mean(axis=0) for a, b in zip(edges[:-1], edges[1:])])
    return FeatureSequence(video_id, domain, segs, label)


def chunk_sizes(t: int, k: int) -> list[int]:
    base, extra = divmod(t, k)
    return [base + 1 if i < extra else base for i in range(k)]


# ---------------------------------------------------------------- FSEQ files


def write_features(path, sequences) -> None:
    sequences = list(sequences)
    dims = {s.dim for s in sequences}
    if len(dims) > 1:
        raise DimensionMismatchError(f"sequences disagree on feature dimension: {sorted(dims)}")
    parts = [_HEADER.pack(MAGIC, VERSION, len(sequences))]
    for s in sequences:
        label = -1 if s.label is None else int(s.label)
        parts.append(_RECORD.pack(int(s.video_id), _DOMAIN_CODES[s.domain], label,
                                  s.num_segments, s.dim))
        parts.append(np.ascontiguousarray(s.segments, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_features(path) -> list[FeatureSequence]:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise TruncatedFileError(_HEADER.size, len(buf))
    magic, version, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FeatureFileError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FeatureFileError(f"unsupported FSEQ version {version}")
    pos = _HEADER.size
    out = []
    dim = None
    for _ in range(count):
        if len(buf) < pos + _RECORD.size:
            raise TruncatedFileError(pos + _RECORD.size, len(buf))
        vid, dom, label, k, d = _RECORD.unpack_from(buf, pos)
        pos += _RECORD.size
        if dom not in _DOMAIN_NAMES:
            raise FeatureFileError(f"video {vid}: unknown domain code {dom}")
        if dim is None:
            dim = d
        elif d != dim:
            raise DimensionMismatchError(f"video {vid} has d={d}, earlier videos d={dim}")
        nbytes = 4 * k * d
        if len(buf) < pos + nbytes:
            raise TruncatedFileError(pos + nbytes, len(buf))
        values = np.frombuffer(buf, dtype="<f4", count=k * d, offset=pos).astype(np.float64)
        pos += nbytes
        out.append(FeatureSequence(vid, _DOMAIN_NAMES[dom], values.reshape(k, d),
                                   None if label == -1 else label))
    if pos != len(buf):
        raise FeatureFileError(f"{len(buf) - pos} trailing bytes after {count} records")
    return out


def file_size(sequences) -> int:
    return _HEADER.size + sum(_RECORD.size + 4 * s.num_segments * s.dim for s in sequences)


def stack(sequences) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(features (N, K, d), labels (N,), ids (N,))``; unlabeled entries get -1."""
    sequences = list(sequences)
    ks = {s.num_segments for s in sequences}
    if len(ks) != 1:
        raise ValueError(f"sequences disagree on segment count: {sorted(ks)}")
    x = np.stack([s.segments for s in sequences])
    y = np.array([-1 if s.label is None else s.label for s in sequences], dtype=np.int64)
    ids = np.array([s.video_id for s in sequences], dtype=np.int64)
    return x, y, ids
