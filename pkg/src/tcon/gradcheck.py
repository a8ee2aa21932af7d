"""Finite-difference verification of every training loss and both objectives.

A micro problem (3 classes, d=4, 3 segments, 2 source + 2 target videos) is
built with all parameters randomised.  Pairs, pseudo-labels and the
stop-gradient values are frozen at the base point, so each loss is a smooth
function of the parameters and both sides differentiate the same function.  Each
reverse-mode gradient coordinate is compared with a central difference.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import losses
from . import pairing
from .networks import ArchConfig
from .numerics import Tape
from .trainer import TrainConfig, compute_losses, init_state, total_loss

EPS = 1e-3
REL_TOL = 1e-4
# below this magnitude a coordinate is judged on absolute error (REL_TOL * FLOOR)
FLOOR = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    n_coords: int
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max rel err {self.max_rel_error:.2e} over {self.n_coords} coords"


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def micro_problem(seed: int = 0, config: TrainConfig | None = None):
    rng = np.random.default_rng(seed)
    c, d, k = 3, 4, 3
    cfg = config or TrainConfig(seed=seed, arch=ArchConfig(projector_hidden=5, attention_hidden=5,
                                                           classifier_hidden=5, disc_segment_hidden=5,
                                                           disc_video_hidden=5))
    state = init_state(cfg, d, c, k)
    for p in state.nets.all_params():
        p.data[...] = rng.normal(0.0, 0.6, size=p.shape)
    state.gate_open = True
    xs = rng.normal(size=(2, k, d))
    xt = rng.normal(size=(2, k, d))
    ys = np.array([0, 2])
    return state, xs, ys, xt


def _frozen_choices(state, xs, xt):
    """Full bipartite pairing and both targets pseudo-labelled."""
    pairs = None
    if state.config.uses_coattention:
        pairs = pairing.select_pairs(np.ones((len(xs), 3)), np.ones((len(xt), 3)), threshold=0.0)
    return pairs, (np.array([0, 1]), np.array([1, 0]))


def _grad_check(name, params, value_fn, analytic) -> CheckResult:
    worst = 0.0
    n = 0
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        num = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + EPS
            up = value_fn()
            flat[i] = orig - EPS
            down = value_fn()
            flat[i] = orig
            num[i] = (up - down) / (2 * EPS)
        err = rel_error(g.reshape(-1), num)
        worst = max(worst, float(err.max(initial=0.0)))
        n += flat.size
    return CheckResult(name, worst, n, worst < REL_TOL)


def check_config(config: TrainConfig | None = None, seed: int = 0, lambda_a: float = 0.8,
                 lambda_d: float = 0.7, label: str = "") -> list[CheckResult]:
    state, xs, ys, xt = micro_problem(seed, config)
    cfg = state.config
    pairs, pseudo = _frozen_choices(state, xs, xt)
    params = state.nets.all_params()
    gen = state.nets.generator_params()
    disc = state.nets.discriminator_params()
    prefix = f"{label} " if label else ""

    frozen = compute_losses(state, xs, ys, xt, -1.0, -1.0, pairs=pairs, pseudo=pseudo).frozen

    def terms(lv=-1.0, ls=-1.0):
        return compute_losses(state, xs, ys, xt, lv, ls, pairs=pairs, pseudo=pseudo, frozen=frozen)

    results = []
    for term in ("c_y", "c_a", "c_dv", "c_ds"):
        for p in params:
            p.grad = None
        with Tape() as tape:
            t = getattr(terms(), term)
            tape.backward(t, params)
        results.append(_grad_check(f"{prefix}{term}", params,
                                   lambda term=term: getattr(terms(), term).item(),
                                   [p.grad.copy() for p in params]))

    lv, ls = losses.reversal_lambdas(lambda_d, cfg.sign_mode)
    for p in params:
        p.grad = None
    with Tape() as tape:
        tape.backward(total_loss(terms(lv, ls), lambda_a), params)
    gen_grads = [p.grad.copy() for p in gen]
    disc_grads = [p.grad.copy() for p in disc]

    def objective(which):
        t = terms()
        g_obj, d_obj = losses.objectives(t.c_y.item(), t.c_a.item(), t.c_dv.item(), t.c_ds.item(),
                                         lambda_a, lambda_d, cfg.sign_mode)
        return g_obj if which == 0 else d_obj

    results.append(_grad_check(f"{prefix}generator objective ({cfg.sign_mode})", gen,
                               lambda: objective(0), gen_grads))
    results.append(_grad_check(f"{prefix}discriminator objective", disc,
                               lambda: objective(1), disc_grads))
    return results


def run_suite(seed: int = 0) -> list[CheckResult]:
    """Default config in both sign modes, plus normalised / non-detached co-attention paths."""
    arch = ArchConfig(projector_hidden=5, attention_hidden=5, classifier_hidden=5,
                      disc_segment_hidden=5, disc_video_hidden=5)
    configs = [
        ("paper", TrainConfig(seed=seed, arch=arch)),
        ("symmetric", TrainConfig(seed=seed, arch=arch, sign_mode="symmetric")),
        ("normalized", TrainConfig(seed=seed, arch=arch, normalize_features=True,
                                   attention_detach_features=False)),
    ]
    out = []
    for label, cfg in configs:
        out.extend(check_config(cfg, seed=seed, label=label))
    return out


def main() -> int:
    t0 = time.perf_counter()
    results = run_suite()
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print(f"{'PASS' if ok else 'FAIL'}: {sum(r.passed for r in results)}/{len(results)} checks "
          f"in {time.perf_counter() - t0:.1f}s")
    return 0 if ok else 1
