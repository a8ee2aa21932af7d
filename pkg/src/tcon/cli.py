"""Command-line entry point: ``tcon <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import coattention as co
from .checkpoint import load_checkpoint
from .coattention import FeatureSequence
from .data import SyntheticSpec, generate, read_features, write_features
from .trainer import VARIANT_FLAGS, VARIANT_NAMES, TrainConfig, _project, evaluate, run

EVAL_LABELS = "eval-labels.json"


def _read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def _load_labels(path, sequences) -> np.ndarray:
    """Labels in sequence order from ``{"<video id>": label}`` JSON."""
    table = {int(k): int(v) for k, v in _read_json(path).items()}
    missing = [s.video_id for s in sequences if s.video_id not in table]
    if missing:
        raise SystemExit(f"{path}: no label for video ids {missing[:5]}")
    return np.array([table[s.video_id] for s in sequences])


def _target_labels(target_path, labels_path, sequences):
    if labels_path is None:
        beside = Path(target_path).with_name(EVAL_LABELS)
        labels_path = beside if beside.exists() else None
    if labels_path is not None:
        return _load_labels(labels_path, sequences)
    if all(s.label is not None for s in sequences):
        return np.array([s.label for s in sequences])
    return None


def _strip_labels(seqs: list[FeatureSequence]) -> list[FeatureSequence]:
    return [FeatureSequence(s.video_id, s.domain, s.segments, None) for s in seqs]


# ---------------------------------------------------------------- subcommands


def cmd_gen(args) -> int:
    spec = SyntheticSpec.from_json(args.spec) if args.spec else SyntheticSpec()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    src, tgt = generate(spec)
    write_features(out / "source.fseq", src)
    write_features(out / "target.fseq", _strip_labels(tgt))
    (out / EVAL_LABELS).write_text(json.dumps({str(s.video_id): s.label for s in tgt}, indent=0))
    print(json.dumps({"source": len(src), "target": len(tgt), "out": str(out)}))
    return 0


def cmd_train(args) -> int:
    cfg = TrainConfig.from_dict(_read_json(args.config)) if args.config else TrainConfig()
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if args.seed is not None:
        cfg.seed = args.seed
    src = read_features(args.source)
    tgt = read_features(args.target)
    labels = _target_labels(args.target, args.labels, tgt)
    result = run(cfg, src, _strip_labels(tgt), target_labels=labels, out_dir=args.out,
                 progress=args.verbose)
    last = result.history[-1]
    print(json.dumps({"epochs": last.epoch, "target_accuracy": last.target_accuracy,
                      "source_accuracy": last.source_accuracy, "out": args.out}))
    return 0


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    tgt = read_features(args.target)
    labels = _target_labels(args.target, args.labels, tgt)
    if labels is None:
        raise SystemExit("target videos are unlabeled; pass --labels")
    x = np.stack([s.segments for s in tgt])
    acc = evaluate(state, x, labels)
    print(json.dumps({"accuracy": acc, "videos": len(tgt),
                      "attention": state.eval_attention_mode}))
    return 0


def _parse_pairs(text: str, n_source: int, n_target: int, src_ids, tgt_ids) -> list[tuple[int, int]]:
    """``k`` selects the k-th source with the k-th target; ``s:t`` selects by video id."""
    out = []
    for item in filter(None, (t.strip() for t in text.split(","))):
        if ":" in item:
            s, t = (int(v) for v in item.split(":", 1))
            if s not in src_ids or t not in tgt_ids:
                raise SystemExit(f"pair {item}: unknown video id")
            out.append((src_ids[s], tgt_ids[t]))
        else:
            k = int(item)
            if not (0 <= k < n_source and k < n_target):
                raise SystemExit(f"pair index {k} out of range")
            out.append((k, k))
    if not out:
        raise SystemExit("--pairs selected nothing")
    return out


def cmd_dump_coattn(args) -> int:
    state = load_checkpoint(args.checkpoint)
    src = read_features(args.source)
    tgt = read_features(args.target)
    src_ids = {s.video_id: i for i, s in enumerate(src)}
    tgt_ids = {s.video_id: i for i, s in enumerate(tgt)}
    chosen = _parse_pairs(args.pairs, len(src), len(tgt), src_ids, tgt_ids)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = state.config
    for k, (i, j) in enumerate(chosen):
        fs = _project(state.nets, src[i].segments[None])
        ft = _project(state.nets, tgt[j].segments[None])
        batch = co.coattention_batch(fs, ft, [0], [0], normalize=cfg.normalize_features, threads=1)
        mat = (batch.raw if args.kind == "raw" else batch.colnorm).data[0]
        path = out / f"pair{k}_src{src[i].video_id}_tgt{tgt[j].video_id}_{args.kind}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# pair={k} src={src[i].video_id} tgt={tgt[j].video_id} "
                     f"Ks={mat.shape[0]} Kt={mat.shape[1]} kind={args.kind}\n")
            writer = csv.writer(fh)
            for row in mat:
                writer.writerow([repr(float(v)) for v in row])
        print(path)
    return 0


def cmd_ablate(args) -> int:
    raw = _read_json(args.config) if args.config else {}
    spec = SyntheticSpec.from_dict(raw.pop("synthetic", {}))
    seeds = [int(s) for s in raw.pop("seeds", [0])]
    base = TrainConfig.from_dict(raw)
    if args.epochs is not None:
        base.epochs = args.epochs
    variants = ["full"] + [v for v in args.variants.split(",") if v and v != "full"]
    for v in variants:
        if v not in VARIANT_FLAGS and v not in ("full", "source_only"):
            raise SystemExit(f"unknown variant {v!r}; choose from {sorted(VARIANT_NAMES)}")
    if args.source and args.target:
        datasets = {None: (read_features(args.source), read_features(args.target))}
    else:
        datasets = None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = {}
    for v in variants:
        accs = []
        for seed in seeds:
            if datasets is None:
                src, tgt = generate(SyntheticSpec.from_dict({**spec.to_dict(), "seed": seed}))
            else:
                src, tgt = datasets[None]
            cfg = TrainConfig.from_dict({**base.to_dict(), "seed": seed}).with_variant(v)
            result = run(cfg, src, tgt, out_dir=out / v / f"seed{seed}")
            accs.append(result.final_target_accuracy)
        table[v] = accs
        print(f"{VARIANT_NAMES[v]}: mean target accuracy {np.mean(accs):.4f}", flush=True)
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "name", "mean_target_accuracy", "std"] +
                        [f"seed{s}" for s in seeds])
        for v, accs in table.items():
            writer.writerow([v, VARIANT_NAMES[v], f"{np.mean(accs):.6f}", f"{np.std(accs):.6f}"] +
                            [f"{a:.6f}" for a in accs])
    return 0


def cmd_gradcheck(args) -> int:
    from . import gradcheck
    return gradcheck.main()


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tcon", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic two-domain dataset")
    p.add_argument("--spec", help="synthetic spec JSON (defaults if omitted)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train on feature files")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--config", help="training config JSON")
    p.add_argument("--labels", help=f"target labels JSON for reporting (default: {EVAL_LABELS} "
                                    "beside the target file)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="target accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--labels")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dump-coattn", help="write co-attention matrices as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--pairs", required=True, help="comma list of k (k-th source with k-th target) "
                                                   "or src_id:tgt_id")
    p.add_argument("--kind", choices=("raw", "colnorm"), default="colnorm")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_coattn)

    p = sub.add_parser("ablate", help="train the full model and ablated variants")
    p.add_argument("--config", help="training config JSON; optional 'synthetic' spec and 'seeds'")
    p.add_argument("--variants", default="sadnet,tadnet,coattn,attn")
    p.add_argument("--source", help="use these feature files instead of synthetic data")
    p.add_argument("--target")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    return int(args.func(args) or 0)


if __name__ == "__main__":
    sys.exit(main())
