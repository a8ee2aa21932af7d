"""Training loop: pairing, co-attention, loss assembly and adversarial updates.

One step records a single tape.  Discriminator inputs pass through gradient
reversal, so one backward pass over ``c_y + lambda_a*c_a + c_dv + c_ds`` gives
the generator (projector, attention net, classifier) the gradient of its
objective and the discriminators the gradient of theirs; each group then takes
its own optimizer step.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import coattention as co
from . import losses
from . import numerics as nx
from . import pairing
from .data import stack
from .networks import (ArchConfig, Networks, build_networks, network_specs, predicted_attention,
                       segment_forward, uniform_attention, video_prediction)
from .numerics import Tape, Tensor

log = logging.getLogger(__name__)

VARIANT_FLAGS = {
    "sadnet": {"disable_segment_disc": True},
    "tadnet": {"disable_aligned_features": True},
    "coattn": {"self_attention_only": True},
    "attn": {"uniform_attention_classifier": True},
}
VARIANT_NAMES = {
    "full": "TCoN",
    "sadnet": "TCoN - SAdNet",
    "tadnet": "TCoN - TAdNet",
    "coattn": "TCoN - CoAttn",
    "attn": "TCoN - Attn",
    "source_only": "Source only",
}


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 100
    batch_size: int = 32
    optimizer: str = "adam"
    lr_generator: float = 3e-3
    lr_discriminator: float = 3e-3
    lambda_a: float = 1.0
    lambda_d_max: float = 1.0
    lambda_d_gamma: float = 10.0
    warmup_threshold: float = 0.005
    warmup_window: int = 20
    pseudo_label_threshold: float | None = 0.9
    pair_threshold: float = 0.5
    top_m: int = 2
    k_source: int | None = None
    k_target: int | None = None
    sign_mode: str = "paper"
    disable_segment_disc: bool = False
    disable_aligned_features: bool = False
    self_attention_only: bool = False
    uniform_attention_classifier: bool = False
    normalize_features: bool = False
    coattention_stop_gradient: bool = False
    attention_detach_features: bool = True
    arch: ArchConfig = field(default_factory=ArchConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        if isinstance(d.get("arch"), dict):
            d["arch"] = ArchConfig(**d["arch"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_variant(self, variant: str) -> "TrainConfig":
        d = self.to_dict()
        if variant == "source_only":
            d.update(lambda_a=0.0, lambda_d_max=0.0, uniform_attention_classifier=True,
                     pseudo_label_threshold=None)
        elif variant != "full":
            d.update(VARIANT_FLAGS[variant])
        return TrainConfig.from_dict(d)

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr_generator <= 0 or self.lr_discriminator <= 0:
            raise ValueError("learning rates must be positive")
        if self.lambda_a < 0 or self.lambda_d_max < 0:
            raise ValueError("trade-offs must be nonnegative")
        if self.pseudo_label_threshold is not None and not 0.0 < self.pseudo_label_threshold <= 1.0:
            raise ValueError("pseudo_label_threshold must be in (0, 1]")
        if self.top_m < 1:
            raise ValueError("top_m must be >= 1 so every target video gets a pair")
        if self.warmup_window < 1 or self.warmup_threshold < 0:
            raise ValueError("warm-up window must be >= 1 and threshold >= 0")
        if self.sign_mode not in losses.SIGN_MODES:
            raise ValueError(f"sign_mode must be one of {losses.SIGN_MODES}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")

    @property
    def uses_coattention(self) -> bool:
        return not self.self_attention_only

    @property
    def uses_attention_net(self) -> bool:
        return not (self.self_attention_only or self.uniform_attention_classifier)


def lambda_schedule(progress: float, gamma: float = 10.0) -> float:
    """Ramp from 0 towards 1: ``2 / (1 + exp(-gamma * p)) - 1``."""
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"progress must be in [0, 1], got {progress}")
    return 2.0 / (1.0 + math.exp(-gamma * progress)) - 1.0


@dataclass
class MetricsRecord:
    epoch: int
    losses: dict
    target_accuracy: float | None
    source_accuracy: float | None
    pseudo_label_rate: float
    disc_video_accuracy: float | None
    disc_segment_accuracy: float | None
    lambda_d: float
    gate_open: bool

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    config: TrainConfig
    nets: Networks
    gen_opt: nx.Optimizer
    disc_opt: nx.Optimizer
    rng: np.random.Generator
    step: int = 0
    gate_open: bool = False
    ca_history: deque = field(default_factory=deque)

    @property
    def target_attention_mode(self) -> str:
        cfg = self.config
        if cfg.self_attention_only:
            return "self"
        if cfg.uniform_attention_classifier or not self.gate_open:
            return "uniform"
        return "predicted"

    @property
    def eval_attention_mode(self) -> str:
        """Attention used at test time; the warm-up gate only affects training."""
        cfg = self.config
        if cfg.self_attention_only:
            return "self"
        if cfg.uniform_attention_classifier:
            return "uniform"
        return "predicted"


def init_state(config: TrainConfig, in_dim: int, num_classes: int, k_target: int) -> TrainState:
    specs = network_specs(in_dim, num_classes, k_target, config.arch)
    nets = build_networks(specs, config.seed, in_dim)
    gen_opt = nx.Optimizer(nets.generator_params(), kind=config.optimizer, lr=config.lr_generator)
    disc_opt = nx.Optimizer(nets.discriminator_params(), kind=config.optimizer, lr=config.lr_discriminator)
    return TrainState(config, nets, gen_opt, disc_opt, batch_rng(config.seed),
                      ca_history=deque(maxlen=config.warmup_window))


def batch_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), 100])


def epoch_batches(rng: np.random.Generator, n_source: int, n_target: int, batch_size: int):
    """Index batches for one pass over the smaller domain, shuffled independently per domain."""
    perm_s = rng.permutation(n_source)
    perm_t = rng.permutation(n_target)
    n = min(n_source, n_target)
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        yield perm_s[start:stop], perm_t[start:stop]


def _project(nets: Networks, x: np.ndarray) -> Tensor:
    return segment_forward(nets.projector, Tensor(x))


def _attention_input(state: TrainState, ft: Tensor, frozen: dict | None = None) -> Tensor:
    if not state.config.attention_detach_features:
        return ft
    if frozen is not None and "ft_attention" in frozen:
        return Tensor(frozen["ft_attention"])
    return nx.detach(ft)


def target_attention(state: TrainState, ft: Tensor, mode: str | None = None,
                     frozen: dict | None = None) -> Tensor:
    mode = mode or state.target_attention_mode
    b, k, _ = ft.shape
    if mode == "self":
        return co.self_attention_batch(ft)
    if mode == "predicted":
        return predicted_attention(state.nets.attention, _attention_input(state, ft, frozen))
    return Tensor(uniform_attention(b, k))


@dataclass
class StepOutput:
    bundle: losses.LossBundle
    disc_video_correct: int = 0
    disc_video_total: int = 0
    disc_segment_correct: int = 0
    disc_segment_total: int = 0
    pseudo_accepted: int = 0
    target_count: int = 0
    pairs: pairing.PairSet | None = None


def _disc_hits(pos: Tensor | None, neg: Tensor | None) -> tuple[int, int]:
    if pos is None or neg is None:
        return 0, 0
    hits = int((pos.data > 0.5).sum() + (neg.data < 0.5).sum())
    return hits, pos.size + neg.size


@dataclass
class LossTerms:
    c_y: Tensor
    c_a: Tensor
    c_dv: Tensor
    c_ds: Tensor
    pairs: pairing.PairSet | None
    pseudo_rows: np.ndarray
    pseudo_labels: np.ndarray
    disc_outputs: tuple
    frozen: dict


def compute_losses(state: TrainState, xs: np.ndarray, ys: np.ndarray, xt: np.ndarray,
                   lam_video: float, lam_segment: float, pairs: pairing.PairSet | None = None,
                   pseudo: tuple[np.ndarray, np.ndarray] | None = None,
                   frozen: dict | None = None) -> LossTerms:
    """Forward pass of one step.  Records on the active tape if there is one.

    ``pairs`` and ``pseudo`` (rows, labels) override the data-dependent choices
    and ``frozen`` replaces the stop-gradient values (the ground-truth target
    attention and the attention net's detached input) with constants; the
    returned ``LossTerms.frozen`` holds this call's values.  Finite-difference
    checks use all three to differentiate the same function as the tape.
    """
    cfg = state.config
    nets = state.nets
    bs, ks, _ = xs.shape
    bt, kt, _ = xt.shape
    zero = Tensor(0.0)

    fs = _project(nets, xs)
    ft = _project(nets, xt)
    probs_s = segment_forward(nets.classifier, fs)
    probs_t = segment_forward(nets.classifier, ft)
    d = fs.shape[2]

    batch = None
    att_t_gt = None
    if cfg.uses_coattention:
        if pairs is None:
            soft_s = video_prediction(Tensor(probs_s.data), uniform_attention(bs, ks)).data
            att_now = target_attention(state, Tensor(ft.data))
            soft_t = video_prediction(Tensor(probs_t.data), Tensor(att_now.data)).data
            pairs = pairing.select_pairs(soft_s, soft_t, cfg.pair_threshold, cfg.top_m,
                                         batch_id=state.step)
        batch = co.coattention_batch(fs, ft, pairs.source_index, pairs.target_index,
                                     normalize=cfg.normalize_features,
                                     stop_gradient=cfg.coattention_stop_gradient)
        att_s_gt, _ = co.ground_truth_batch(batch, co.SOURCE, bs)
        att_t_gt, _ = co.ground_truth_batch(batch, co.TARGET, bt)
        if frozen is not None and "att_t_gt" in frozen:
            att_t_gt = Tensor(frozen["att_t_gt"])

    # classifier attention
    if cfg.self_attention_only:
        att_s = co.self_attention_batch(fs)
    elif cfg.uniform_attention_classifier:
        att_s = Tensor(uniform_attention(bs, ks))
    else:
        att_s = att_s_gt
    att_t = target_attention(state, ft, frozen=frozen)

    # attention regression against detached ground truth
    c_a = zero
    if att_t_gt is not None:
        c_a = losses.attention_loss(predicted_attention(nets.attention, _attention_input(state, ft, frozen)),
                                    Tensor(att_t_gt.data))
        if not cfg.uses_attention_net:
            # monitored only, so the warm-up gate still means something
            c_a = Tensor(c_a.data)

    c_y = losses.cross_entropy(video_prediction(probs_s, att_s), ys)
    rows = labels = np.zeros(0, dtype=np.intp)
    if pseudo is not None or (cfg.pseudo_label_threshold is not None and state.gate_open):
        pred_t = video_prediction(probs_t, att_t)
        if pseudo is None:
            rows, labels = losses.pseudo_labels(pred_t.data, cfg.pseudo_label_threshold)
        else:
            rows, labels = (np.asarray(a, dtype=np.intp) for a in pseudo)
        if len(rows):
            c_y = c_y + losses.cross_entropy(nx.take(pred_t, rows), labels)

    # domain discriminators
    v_pos = v_neg = s_pos = s_neg = None
    big_ft = nx.reshape(ft, (bt, kt * d))
    if cfg.uses_coattention and not cfg.disable_aligned_features:
        aligned = co.aligned_batch(batch, fs)
        p = aligned.shape[0]
        v_pos = nets.disc_video(nx.grad_reverse(big_ft, lam_video))
        v_neg = nets.disc_video(nx.grad_reverse(nx.reshape(aligned, (p, kt * d)), lam_video))
        if not cfg.disable_segment_disc:
            s_pos = nets.disc_segment(nx.grad_reverse(nx.reshape(fs, (bs * ks, d)), lam_segment))
            s_neg = nets.disc_segment(nx.grad_reverse(nx.reshape(aligned, (p * kt, d)), lam_segment))
    else:
        if ks != kt:
            raise ValueError("matching concatenated source and target features needs K_s == K_t")
        v_pos = nets.disc_video(nx.grad_reverse(big_ft, lam_video))
        v_neg = nets.disc_video(nx.grad_reverse(nx.reshape(fs, (bs, ks * d)), lam_video))
    c_dv = losses.domain_loss(v_pos, v_neg)
    c_ds = losses.domain_loss(s_pos, s_neg) if s_pos is not None else zero
    kept = {"ft_attention": ft.data.copy()}
    if att_t_gt is not None:
        kept["att_t_gt"] = att_t_gt.data.copy()
    return LossTerms(c_y, c_a, c_dv, c_ds, pairs, rows, labels, (v_pos, v_neg, s_pos, s_neg), kept)


def total_loss(terms: LossTerms, lambda_a: float) -> Tensor:
    """Single-backward surrogate; gradient reversal supplies the adversarial signs."""
    return terms.c_y + terms.c_a * lambda_a + terms.c_dv + terms.c_ds


def train_step(state: TrainState, xs: np.ndarray, ys: np.ndarray, xt: np.ndarray,
               lambda_d: float) -> StepOutput:
    cfg = state.config
    lam_video, lam_segment = losses.reversal_lambdas(lambda_d, cfg.sign_mode)
    with Tape() as tape:
        terms = compute_losses(state, xs, ys, xt, lam_video, lam_segment)
        state.gen_opt.zero_grad()
        state.disc_opt.zero_grad()
        tape.backward(total_loss(terms, cfg.lambda_a), state.nets.all_params())
    state.gen_opt.step()
    state.disc_opt.step()
    state.step += 1

    ca = terms.c_a.item()
    if terms.pairs is not None or cfg.self_attention_only:
        state.ca_history.append(ca)
        if (not state.gate_open and len(state.ca_history) == cfg.warmup_window
                and (cfg.self_attention_only or np.mean(state.ca_history) < cfg.warmup_threshold)):
            state.gate_open = True
            log.debug("warm-up gate opened at step %d", state.step)

    c_y, c_dv, c_ds = terms.c_y.item(), terms.c_dv.item(), terms.c_ds.item()
    gen_obj, disc_obj = losses.objectives(c_y, ca, c_dv, c_ds, cfg.lambda_a, lambda_d, cfg.sign_mode)
    n_pseudo = len(terms.pseudo_rows)
    bundle = losses.LossBundle(c_y, ca, c_dv, c_ds, gen_obj, disc_obj, n_source=len(xs),
                               n_pseudo=n_pseudo, n_pairs=len(terms.pairs) if terms.pairs else 0)
    v_pos, v_neg, s_pos, s_neg = terms.disc_outputs
    vh, vt = _disc_hits(v_pos, v_neg)
    sh, st = _disc_hits(s_pos, s_neg)
    return StepOutput(bundle, vh, vt, sh, st, n_pseudo, len(xt), terms.pairs)


def predict(state: TrainState, x: np.ndarray, mode: str | None = None) -> np.ndarray:
    """Class probabilities for a ``(N, K, d)`` stack using only these videos."""
    f = _project(state.nets, x)
    probs = segment_forward(state.nets.classifier, f)
    return video_prediction(probs, target_attention(state, f, mode or state.eval_attention_mode)).data


def evaluate(state: TrainState, x: np.ndarray, labels: np.ndarray, mode: str | None = None) -> float:
    """Accuracy of argmax predictions (ties to the lowest class) on target-style data."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        return float("nan")
    pred = np.argmax(predict(state, x, mode), axis=1)
    return float(np.mean(pred == labels))


@dataclass
class RunResult:
    history: list[MetricsRecord]
    state: TrainState

    @property
    def final_target_accuracy(self) -> float | None:
        return self.history[-1].target_accuracy


def _mean_bundle(outputs: list[StepOutput]) -> dict:
    if not outputs:
        return {}
    keys = ("c_y", "c_a", "c_dv", "c_ds", "generator_objective", "discriminator_objective")
    out = {k: float(np.mean([getattr(o.bundle, k) for o in outputs])) for k in keys}
    out["n_pairs"] = float(np.mean([o.bundle.n_pairs for o in outputs]))
    return out


def _ratio(a: int, b: int) -> float | None:
    return a / b if b else None


def run(config: TrainConfig, source, target, target_labels=None, out_dir=None,
        progress: bool = False) -> RunResult:
    """Train from scratch; returns the per-epoch metrics history and final state.

    ``source``/``target`` are lists of :class:`~tcon.coattention.FeatureSequence`.
    Target labels (from ``target_labels`` or the sequences) are used only for
    reporting accuracy.  With ``out_dir``, writes ``metrics.jsonl`` every epoch,
    ``checkpoint.tcon`` at the end and ``best.tcon`` at the best target accuracy.
    """
    from .checkpoint import save_checkpoint

    config.validate()
    xs, ys, _ = stack(source)
    xt, yt_file, _ = stack(target)
    yt = np.asarray(target_labels) if target_labels is not None else yt_file
    has_labels = yt is not None and len(yt) == len(xt) and np.all(yt >= 0)
    if np.any(ys < 0):
        raise ValueError("every source video needs a label")
    for name, want, got in (("k_source", config.k_source, xs.shape[1]),
                            ("k_target", config.k_target, xt.shape[1])):
        if want is not None and want != got:
            raise ValueError(f"config {name}={want} but data has {got} segments")
    if xs.shape[2] != xt.shape[2]:
        raise ValueError(f"feature dimension differs: source {xs.shape[2]}, target {xt.shape[2]}")
    num_classes = int(ys.max()) + 1
    if has_labels:
        num_classes = max(num_classes, int(yt.max()) + 1)
    num_classes = max(num_classes, 2)

    state = init_state(config, xs.shape[2], num_classes, xt.shape[1])
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text("")

    steps_per_epoch = math.ceil(min(len(xs), len(xt)) / config.batch_size)
    total_steps = max(1, steps_per_epoch * config.epochs)
    history: list[MetricsRecord] = []
    best = -1.0

    def record(epoch: int, outputs: list[StepOutput], lam: float) -> None:
        nonlocal best
        tacc = evaluate(state, xt, yt) if has_labels else None
        sacc = evaluate(state, xs, ys)
        n_t = sum(o.target_count for o in outputs)
        rec = MetricsRecord(
            epoch=epoch,
            losses=_mean_bundle(outputs),
            target_accuracy=tacc,
            source_accuracy=sacc,
            pseudo_label_rate=(sum(o.pseudo_accepted for o in outputs) / n_t) if n_t else 0.0,
            disc_video_accuracy=_ratio(sum(o.disc_video_correct for o in outputs),
                                       sum(o.disc_video_total for o in outputs)),
            disc_segment_accuracy=_ratio(sum(o.disc_segment_correct for o in outputs),
                                         sum(o.disc_segment_total for o in outputs)),
            lambda_d=lam,
            gate_open=state.gate_open,
        )
        history.append(rec)
        if progress:
            log.info("epoch %d target_acc=%s loss=%s", epoch, tacc, rec.losses)
        if out is not None:
            with open(out / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
            if tacc is not None and tacc > best and epoch > 0:
                best = tacc
                save_checkpoint(out / "best.tcon", state)

    record(0, [], 0.0)
    lam = 0.0
    for epoch in range(1, config.epochs + 1):
        outputs = []
        for bi_s, bi_t in epoch_batches(state.rng, len(xs), len(xt), config.batch_size):
            lam = config.lambda_d_max * lambda_schedule(min(1.0, state.step / total_steps),
                                                        config.lambda_d_gamma)
            outputs.append(train_step(state, xs[bi_s], ys[bi_s], xt[bi_t], lam))
        record(epoch, outputs, lam)
    if out is not None:
        save_checkpoint(out / "checkpoint.tcon", state)
    return RunResult(history, state)
