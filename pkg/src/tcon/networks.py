"""Fully-connected networks: projector, attention net, classifier, discriminators."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor

PROJECTOR = "projector"
ATTENTION = "attention"
CLASSIFIER = "classifier"
DISC_VIDEO = "disc_video"
DISC_SEGMENT = "disc_segment"
ROLES = (PROJECTOR, ATTENTION, CLASSIFIER, DISC_VIDEO, DISC_SEGMENT)
GENERATOR_ROLES = (PROJECTOR, ATTENTION, CLASSIFIER)
DISCRIMINATOR_ROLES = (DISC_VIDEO, DISC_SEGMENT)

_ACTIVATIONS = ("none", "relu", "softmax", "sigmoid")


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]
    hidden_activation: str = "relu"
    output_activation: str = "none"
    zero_last: bool = False

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ValueError(f"MLP needs >= 2 widths, all >= 1; got {self.widths}")
        for act in (self.hidden_activation, self.output_activation):
            if act not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")

    @property
    def num_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.widths[:-1], self.widths[1:]))

    def to_dict(self) -> dict:
        return {"widths": list(self.widths), "hidden_activation": self.hidden_activation,
                "output_activation": self.output_activation, "zero_last": self.zero_last}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(tuple(d["widths"]), d.get("hidden_activation", "relu"),
                   d.get("output_activation", "none"), d.get("zero_last", False))


def _activate(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return nx.relu(x)
    if kind == "sigmoid":
        return nx.sigmoid(x)
    if kind == "softmax":
        return nx.softmax(x, axis=-1)
    return x


class Mlp:
    """Stack of affine layers; weights are ``(fan_in, fan_out)`` leaf tensors."""

    def __init__(self, spec: MlpSpec, role: str, rng: np.random.Generator | None = None):
        self.spec = spec
        self.role = role
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params: list[Tensor] = []
        n_layers = len(spec.widths) - 1
        for i, (fan_in, fan_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
            if spec.zero_last and i == n_layers - 1:
                w = np.zeros((fan_in, fan_out))
            else:
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            self.params.append(nx.parameter(w, name=f"{role}.W{i}"))
            self.params.append(nx.parameter(np.zeros(fan_out), name=f"{role}.b{i}"))

    @property
    def in_dim(self) -> int:
        return self.spec.widths[0]

    @property
    def out_dim(self) -> int:
        return self.spec.widths[-1]

    def named_params(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.params}

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"{self.role}: expected input width {self.in_dim}, got {x.shape[-1]}")
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            x = nx.matmul(x, self.params[2 * i]) + self.params[2 * i + 1]
            last = i == n_layers - 1
            x = _activate(x, self.spec.output_activation if last else self.spec.hidden_activation)
        return x


class Projector:
    """Feature projector on precomputed segment features; identity when disabled."""

    def __init__(self, mlp: Mlp | None, dim: int):
        self.mlp = mlp
        self.dim = dim

    @property
    def params(self) -> list[Tensor]:
        return self.mlp.params if self.mlp is not None else []

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.dim:
            raise ShapeError(f"projector: expected input width {self.dim}, got {x.shape[-1]}")
        return x if self.mlp is None else self.mlp(x)

    @property
    def out_dim(self) -> int:
        return self.dim if self.mlp is None else self.mlp.out_dim


@dataclass
class ArchConfig:
    """Network widths.  ``projector_hidden=None`` keeps the projector's default width ``d``."""

    use_projector: bool = True
    projector_hidden: int | None = None
    attention_hidden: int = 64
    classifier_hidden: int = 64
    disc_segment_hidden: int = 64
    disc_video_hidden: int = 128


@dataclass
class Networks:
    projector: Projector
    attention: Mlp
    classifier: Mlp
    disc_video: Mlp
    disc_segment: Mlp
    specs: dict[str, MlpSpec] = field(default_factory=dict)

    def by_role(self, role: str) -> list[Tensor]:
        if role == PROJECTOR:
            return self.projector.params
        return getattr(self, role).params

    def generator_params(self) -> list[Tensor]:
        return [p for r in GENERATOR_ROLES for p in self.by_role(r)]

    def discriminator_params(self) -> list[Tensor]:
        return [p for r in DISCRIMINATOR_ROLES for p in self.by_role(r)]

    def all_params(self) -> list[Tensor]:
        return self.generator_params() + self.discriminator_params()

    def named_params(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.all_params()}


def role_rng(seed: int, role: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), ROLES.index(role)])


def network_specs(in_dim: int, num_classes: int, k_target: int, arch: ArchConfig) -> dict[str, MlpSpec]:
    if num_classes < 2:
        raise ValueError("classifier needs at least 2 classes")
    d = in_dim
    specs = {}
    if arch.use_projector:
        h = arch.projector_hidden or d
        specs[PROJECTOR] = MlpSpec((in_dim, h, d))
    specs[ATTENTION] = MlpSpec((d, arch.attention_hidden, 1), output_activation="sigmoid", zero_last=True)
    specs[CLASSIFIER] = MlpSpec((d, arch.classifier_hidden, num_classes), output_activation="softmax")
    specs[DISC_VIDEO] = MlpSpec((k_target * d, arch.disc_video_hidden, 1),
                                output_activation="sigmoid", zero_last=True)
    specs[DISC_SEGMENT] = MlpSpec((d, arch.disc_segment_hidden, 1),
                                  output_activation="sigmoid", zero_last=True)
    return specs


def build_networks(specs: dict[str, MlpSpec], seed: int, in_dim: int) -> Networks:
    """Instantiate every network; each role draws from its own seeded stream."""
    proj = Mlp(specs[PROJECTOR], PROJECTOR, role_rng(seed, PROJECTOR)) if PROJECTOR in specs else None
    return Networks(
        projector=Projector(proj, in_dim),
        attention=Mlp(specs[ATTENTION], ATTENTION, role_rng(seed, ATTENTION)),
        classifier=Mlp(specs[CLASSIFIER], CLASSIFIER, role_rng(seed, CLASSIFIER)),
        disc_video=Mlp(specs[DISC_VIDEO], DISC_VIDEO, role_rng(seed, DISC_VIDEO)),
        disc_segment=Mlp(specs[DISC_SEGMENT], DISC_SEGMENT, role_rng(seed, DISC_SEGMENT)),
        specs=dict(specs),
    )


# ---------------------------------------------------------------- forwards


def segment_forward(net, x: Tensor) -> Tensor:
    """Apply a per-segment network to a ``(B, K, d)`` stack, returning ``(B, K, out)``."""
    b, k, d = x.shape
    out = net(nx.reshape(x, (b * k, d)))
    return nx.reshape(out, (b, k, out.shape[-1]))


def predicted_attention(attention: Mlp, f: Tensor) -> Tensor:
    """Per-segment sigmoid scores normalised over each video's segments, ``(B, K)``."""
    scores = segment_forward(attention, f)
    b, k, _ = scores.shape
    scores = nx.reshape(scores, (b, k))
    return scores / nx.sum(scores, axis=1, keepdims=True)


def video_prediction(segment_probs: Tensor, attention) -> Tensor:
    """Attention-weighted sum of per-segment class probabilities, ``(B, C)``."""
    attention = nx.tensor(attention)
    if attention.shape != segment_probs.shape[:2]:
        raise ShapeError(f"attention shape {attention.shape} does not match segments "
                         f"{segment_probs.shape[:2]}")
    b, k = attention.shape
    return nx.sum(segment_probs * nx.reshape(attention, (b, k, 1)), axis=1)


def uniform_attention(b: int, k: int) -> np.ndarray:
    return np.full((b, k), 1.0 / k)
