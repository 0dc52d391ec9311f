"""Command-line front end.

Subcommands cover the whole pipeline: `gen-data` synthesizes a corpus,
`train` fits a model, `eval` reports retrieval metrics, `score` exports
redundancy scores and heatmaps, and `ablate` sweeps one config axis.

Every command resolves its configuration as defaults < JSON config file
< command-line flags, then records a manifest of the resolved settings
before doing any work, so interrupted runs still say what they were.

Exit codes: 0 on success, 2 for configuration and usage problems, 1 for
runtime failures (unreadable files, numeric faults, bad inputs).
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .datasynth import (
    CorpusConfig,
    corpus_config_from_dict,
    generate_corpus,
    load_corpus,
    save_corpus,
    split_indices,
)
from .encoders import EncoderConfig, encoder_config_from_dict, load_checkpoint
from .errors import ConfigError, InputError, RedconError
from .evaluate import (
    evaluate_zero_shot,
    redundancy_report,
    run_ablation,
    write_heatmap,
)
from .trainer import run_training, train_config_from_dict

SPLITS = ("train", "val", "test", "all")

# encoder settings a user may choose; geometry always follows the corpus
ENCODER_FREE_FIELDS = ("hidden", "proj_dim", "layers", "heads",
                       "use_positions", "seed")


def _read_json(path) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except OSError as e:
        raise InputError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e


def _overrides(args, fields) -> dict:
    return {f: getattr(args, f) for f in fields if getattr(args, f, None) is not None}


def write_manifest(directory: Path, command: str, payload: dict) -> Path:
    """Record resolved settings under `directory` before any work runs."""
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "manifest.json"
    body = {
        "command": command,
        "argv": sys.argv[1:],
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "version": __version__,
    }
    body.update(payload)
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return path


def _default_run_dir(kind: str, seed: int) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return Path("runs") / f"{kind}-{stamp}-seed{seed}"


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------

_CORPUS_FIELDS = tuple(CorpusConfig.__dataclass_fields__)
_TRAIN_FIELDS = ("batch_size", "epochs", "peak_lr", "warmup_steps",
                 "weight_decay", "temperature", "learn_temperature", "lam",
                 "direction", "weight_floor", "frames_used", "seed",
                 "log_every", "checkpoint_every")


def _resolve_corpus_config(args) -> CorpusConfig:
    merged = _read_json(args.config) if args.config else {}
    merged.update(_overrides(args, _CORPUS_FIELDS))
    return corpus_config_from_dict(merged)


def _resolve_train_config(args):
    merged = _read_json(args.config) if args.config else {}
    merged.update(_overrides(args, _TRAIN_FIELDS))
    return train_config_from_dict(merged)


def _resolve_encoder_config(args, corpus_cfg: CorpusConfig) -> EncoderConfig:
    free = _read_json(args.encoder_config) if args.encoder_config else {}
    stray = set(free) - set(ENCODER_FREE_FIELDS)
    if stray:
        raise ConfigError(
            f"encoder config may only set {ENCODER_FREE_FIELDS}; geometry "
            f"comes from the corpus. Offending keys: {sorted(stray)}")
    for flag, dest in (("hidden", "hidden"), ("proj_dim", "proj_dim"),
                       ("layers", "layers"), ("heads", "heads"),
                       ("encoder_seed", "seed")):
        value = getattr(args, flag, None)
        if value is not None:
            free[dest] = value
    geometry = {
        "frames": corpus_cfg.frames,
        "patches": corpus_cfg.patches,
        "patch_dim": corpus_cfg.patch_dim,
        "tokens": corpus_cfg.tokens,
        "vocab_size": corpus_cfg.vocab_size,
    }
    return encoder_config_from_dict({**free, **geometry})


def _load_model(checkpoint_path):
    params, meta = load_checkpoint(checkpoint_path)
    if "encoder" not in meta:
        raise ConfigError(
            f"{checkpoint_path} carries no encoder settings; re-train with "
            f"this package or pass a checkpoint written by it")
    return params, encoder_config_from_dict(meta["encoder"]), meta


def _select_split(corpus, name: str):
    if name == "all":
        return corpus.records
    subset = split_indices(len(corpus))[name]
    if not subset:
        raise InputError(f"split {name!r} of a {len(corpus)}-pair corpus is empty")
    return [corpus.records[i] for i in subset]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _resolve_corpus_config(args)
    out = Path(args.out)
    write_manifest(out.parent if out.parent != Path("") else Path("."),
                   "gen-data", {"corpus_config": asdict(cfg), "out": str(out),
                                "config_path": args.config})
    corpus = generate_corpus(cfg)
    save_corpus(out, corpus)
    print(f"wrote {len(corpus)} pairs to {out} ({out.stat().st_size} bytes)")
    return 0


def cmd_train(args) -> int:
    corpus = load_corpus(args.corpus)
    tcfg = _resolve_train_config(args)
    enc_cfg = _resolve_encoder_config(args, corpus.config)
    out_dir = Path(args.out_dir) if args.out_dir else _default_run_dir("train", tcfg.seed)
    write_manifest(out_dir, "train", {
        "corpus": str(args.corpus),
        "corpus_config": asdict(corpus.config),
        "train_config": asdict(tcfg),
        "encoder_config": asdict(enc_cfg),
        "config_path": args.config,
    })
    records = _select_split(corpus, "train")
    result = run_training(records, enc_cfg, tcfg, out_dir)
    last = result.last_record.get("total")
    print(f"trained {result.steps} steps on {len(records)} pairs; "
          f"final loss {last if last is None else f'{last:.4f}'}; "
          f"checkpoint {result.final_checkpoint}")
    return 0


def cmd_eval(args) -> int:
    corpus = load_corpus(args.corpus)
    params, enc_cfg, _ = _load_model(args.checkpoint)
    records = _select_split(corpus, args.split)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"eval_{args.split}.json"
    write_manifest(out.parent, "eval", {
        "corpus": str(args.corpus),
        "checkpoint": str(args.checkpoint),
        "split": args.split,
        "frames_used": args.frames_used,
        "out": str(out),
    })
    report = evaluate_zero_shot(params, enc_cfg, records,
                                frames_used=args.frames_used)
    out.write_text(json.dumps(report.as_dict(), indent=2, sort_keys=True) + "\n")
    v, t = report.v2t, report.t2v
    print(f"{args.split}: {report.pairs} pairs | "
          f"v2t R@1 {v.r1:.1f} R@5 {v.r5:.1f} R@10 {v.r10:.1f} MdR {v.mdr:.1f} | "
          f"t2v R@1 {t.r1:.1f} R@5 {t.r5:.1f} R@10 {t.r10:.1f} MdR {t.mdr:.1f}")
    print(f"report written to {out}")
    return 0


def cmd_score(args) -> int:
    corpus = load_corpus(args.corpus)
    params, enc_cfg, _ = _load_model(args.checkpoint)
    records = _select_split(corpus, args.split)
    out_dir = (Path(args.out_dir) if args.out_dir
               else Path(args.checkpoint).parent / f"score-{args.split}")
    write_manifest(out_dir, "score", {
        "corpus": str(args.corpus),
        "checkpoint": str(args.checkpoint),
        "split": args.split,
        "frames_used": args.frames_used,
    })
    rep = redundancy_report(params, enc_cfg, records,
                            frames_used=args.frames_used)

    chosen = [0] if args.pairs is None else _parse_int_list(args.pairs)
    for pos in chosen:
        if not 0 <= pos < len(records):
            raise InputError(
                f"pair position {pos} outside split of {len(records)} records")
        tag = f"pair{records[pos].index}"
        write_heatmap(out_dir / f"{tag}_dissimilarity.pgm",
                      rep.dissimilarity[pos], label=f"{tag} patch-token dissimilarity")
        write_heatmap(out_dir / f"{tag}_token_weights.pgm",
                      rep.token_weights[pos], label=f"{tag} token weights")
        write_heatmap(out_dir / f"{tag}_patch_weights.pgm",
                      rep.patch_weights[pos], label=f"{tag} patch weights")

    detail = {
        "summary": rep.summary(),
        "pairs": [
            {
                "index": int(records[i].index),
                "token_scores": rep.token_scores[i].tolist(),
                "token_weights": rep.token_weights[i].tolist(),
                "token_aligned": rep.token_aligned[i].tolist(),
                "token_argmin": rep.token_argmin[i],
                "patch_scores": rep.patch_scores[i].tolist(),
                "patch_weights": rep.patch_weights[i].tolist(),
                "patch_aligned": rep.patch_aligned[i].tolist(),
                "patch_argmin": rep.patch_argmin[i],
            }
            for i in range(len(records))
        ],
    }
    report_path = out_dir / "scores.json"
    report_path.write_text(json.dumps(detail, indent=2, sort_keys=True) + "\n")
    s = rep.summary()
    print(f"{args.split}: token separation {s['token_separation']:.4f}, "
          f"patch separation {s['patch_separation']:.4f}; "
          f"details in {report_path}")
    return 0


def _parse_int_list(text: str):
    try:
        return [int(p) for p in text.split(",") if p.strip() != ""]
    except ValueError as e:
        raise InputError(f"expected comma-separated integers, got {text!r}") from e


def _parse_axis_values(axis: str, text: Optional[str]):
    if text is None:
        return None
    parts = [p.strip() for p in text.split(",") if p.strip() != ""]
    if not parts:
        raise ConfigError(f"--values {text!r} holds no values")
    try:
        if axis == "lam":
            return [float(p) for p in parts]
        if axis == "frames":
            return [int(p) for p in parts]
    except ValueError as e:
        raise ConfigError(f"--values {text!r} does not parse for axis {axis}") from e
    return parts


def cmd_ablate(args) -> int:
    corpus = load_corpus(args.corpus)
    tcfg = _resolve_train_config(args)
    enc_cfg = _resolve_encoder_config(args, corpus.config)
    values = _parse_axis_values(args.axis, args.values)
    out_dir = (Path(args.out_dir) if args.out_dir
               else _default_run_dir(f"ablate-{args.axis}", tcfg.seed))
    write_manifest(out_dir, "ablate", {
        "corpus": str(args.corpus),
        "axis": args.axis,
        "values": values,
        "train_config": asdict(tcfg),
        "encoder_config": asdict(enc_cfg),
        "config_path": args.config,
    })
    rows = run_ablation(
        _select_split(corpus, "train"), _select_split(corpus, "test"),
        enc_cfg, tcfg, out_dir, args.axis, values)
    for row in rows:
        print(f"{args.axis}={row['value']}: v2t R@1 {row['v2t_r1']:.1f} "
              f"t2v R@1 {row['t2v_r1']:.1f} "
              f"token sep {row['token_separation']:.4f}")
    print(f"table written to {out_dir / f'ablation_{args.axis}.tsv'}")
    return 0


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------

def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with training settings")
    p.add_argument("--encoder-config", dest="encoder_config",
                   help="JSON file with encoder settings (non-geometry only)")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--peak-lr", dest="peak_lr", type=float)
    p.add_argument("--warmup-steps", dest="warmup_steps", type=int)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--learn-temperature", dest="learn_temperature",
                   action="store_const", const=True,
                   help="train a log-temperature instead of fixing it")
    p.add_argument("--lam", type=float,
                   help="scale on the weighted terms; 0 disables them")
    p.add_argument("--direction", choices=("both", "v2t", "t2v", "off"))
    p.add_argument("--weight-floor", dest="weight_floor", type=float)
    p.add_argument("--frames-used", dest="frames_used", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--log-every", dest="log_every", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--proj-dim", dest="proj_dim", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--encoder-seed", dest="encoder_seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="redcon",
        description="Redundancy-aware contrastive video-text training")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="synthesize a paired corpus")
    g.add_argument("--out", required=True, help="corpus file to write")
    g.add_argument("--config", help="JSON file with corpus settings")
    g.add_argument("--pairs", type=int)
    g.add_argument("--frames", type=int)
    g.add_argument("--patches", type=int)
    g.add_argument("--patch-dim", dest="patch_dim", type=int)
    g.add_argument("--tokens", type=int)
    g.add_argument("--concepts", type=int)
    g.add_argument("--token-slots", dest="token_slots", type=int)
    g.add_argument("--concept-dim", dest="concept_dim", type=int)
    g.add_argument("--distractors", type=int)
    g.add_argument("--rho-v", dest="redundant_patch_rate", type=float,
                   help="planted fraction of redundant patches")
    g.add_argument("--rho-t", dest="redundant_token_rate", type=float,
                   help="planted fraction of redundant tokens")
    g.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train on a corpus")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out-dir", dest="out_dir")
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="zero-shot retrieval metrics")
    e.add_argument("--corpus", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=SPLITS, default="test")
    e.add_argument("--frames-used", dest="frames_used", type=int)
    e.add_argument("--out", help="report JSON path")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("score", help="redundancy scores and heatmaps")
    s.add_argument("--corpus", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", choices=SPLITS, default="test")
    s.add_argument("--frames-used", dest="frames_used", type=int)
    s.add_argument("--out-dir", dest="out_dir")
    s.add_argument("--pairs", help="comma-separated split positions to plot")
    s.set_defaults(func=cmd_score)

    a = sub.add_parser("ablate", help="sweep one config axis")
    a.add_argument("--corpus", required=True)
    a.add_argument("--axis", required=True, choices=("direction", "lam", "frames"))
    a.add_argument("--values", help="comma-separated settings to sweep")
    a.add_argument("--out-dir", dest="out_dir")
    _add_train_flags(a)
    a.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except RedconError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
