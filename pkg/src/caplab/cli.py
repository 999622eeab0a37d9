"""Command-line entry point: synthesis, training, evaluation, control, serving.

Option precedence is documented and fixed: built-in defaults, then the
--config JSON file, then explicit flags.  Every failure exits non-zero
with a one-line JSON error on stderr; CAPLAB_LOG=debug|info|warning
tunes logging.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .corpus import (
    Dataset, ToyGrammarSpec, default_grammar, load_dataset, read_json,
    synth_corpus, write_json,
)
from .errors import (
    ConfigError, DomainError, FormatError, GraphError, NumericError, ShapeError,
)
from .inference import Caption, ControlSession, caption_clip
from .model import (
    CaptionModel, ModelConfig, check_data_compat, load_model, save_model,
)
from .posgen import POS_TAGS
from .report import (
    format_table, write_ablation_report, write_attention_figure,
    write_eval_report, write_training_curves,
)
from .training import (
    TrainConfig, evaluate_model, run_ablation, train_pos, train_scst, train_xe,
)

log = logging.getLogger("caplab")

CAPLAB_ERRORS = (ShapeError, DomainError, GraphError, NumericError,
                 FormatError, ConfigError, OSError)

# stages each training command may resume from; first entry is the
# stage the command itself records
_STAGE_FLOW = {
    "train-pos": ("pos",),
    "train-xe": ("caption_xe", "pos"),
    "train-rl": ("caption_rl", "caption_xe"),
}


class _Parser(argparse.ArgumentParser):
    """Argparse that reports usage problems as JSON on stderr."""

    def error(self, message):
        _emit_error("usage", message)
        raise SystemExit(2)


def _emit_error(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message},
                                sort_keys=True) + "\n")


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    doc = read_json(path)
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: run configuration must be a JSON object")
    return doc


def _pick(flag_value, config: dict, key: str, default):
    """defaults < config file < explicit flag."""
    if flag_value is not None:
        return flag_value
    if key in config:
        return config[key]
    return default


def _model_config(config: dict, ds: Dataset) -> ModelConfig:
    fields = dict(vocab_size=len(ds.vocab),
                  content_dim=ds.grammar.content_dim,
                  motion_dim=ds.grammar.motion_dim,
                  pad_len=ds.grammar.pad_len)
    section = config.get("model", {})
    allowed = {"hidden", "embed_dim", "attn_dim", "fused_dim", "max_words",
               "fusion_mode", "use_pos_guidance", "mask_padding"}
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
    fields.update(section)
    return ModelConfig(**fields)


def _train_config(config: dict, seed: int, log_path: Path | None) -> TrainConfig:
    section = dict(config.get("train", {}))
    allowed = {"epochs", "batch_size", "patience", "rho", "eps", "clip_norm",
               "learning_rate", "scst_temperature", "freeze_encoder",
               "guidance_source"}
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
    return TrainConfig(seed=seed, log_path=log_path, **section)


def _find_clip(ds: Dataset, clip_id: str):
    for split in ds.splits.values():
        for ex in split:
            if ex.clip.clip_id == clip_id:
                return ex
    raise DomainError(f"unknown clip {clip_id!r}")


def _parse_edit(text: str, op: str) -> tuple[str, int, str]:
    tag, sep, idx = text.partition("@")
    if not sep or not idx.lstrip("-").isdigit():
        raise DomainError(
            f"malformed {op} {text!r}; expected TAG@INDEX, e.g. NUM@0")
    return op, int(idx), tag


# -- subcommands -------------------------------------------------------


def cmd_synth(args, config) -> int:
    seed = _pick(args.seed, config, "seed", 0)
    if args.spec is not None:
        grammar = ToyGrammarSpec.from_dict(read_json(args.spec))
    elif "grammar" in config:
        grammar = ToyGrammarSpec.from_dict(config["grammar"])
    else:
        grammar = default_grammar()
    sizes = {k: _pick(getattr(args, f"n_{k}"), config, f"n_{k}", d)
             for k, d in (("train", 120), ("val", 30), ("test", 30))}
    path = synth_corpus(grammar, args.out, seed=seed, n_train=sizes["train"],
                        n_val=sizes["val"], n_test=sizes["test"])
    log.info("corpus written to %s", args.out)
    print(str(path))
    return 0


def _run_stage(args, config, command: str) -> int:
    seed = _pick(args.seed, config, "seed", 0)
    ds = load_dataset(args.data)
    record_stage, *resume_from = _STAGE_FLOW[command]

    if args.init_from is not None:
        model, meta = load_model(args.init_from)
        check_data_compat(model, meta, ds)
        ok_stages = (record_stage,) + tuple(resume_from)
        if meta["stage"] not in ok_stages and not args.force:
            raise ConfigError(
                f"{command} expects a checkpoint from stage "
                f"{' or '.join(ok_stages)}, got {meta['stage']!r}; "
                f"pass --force to override")
    elif resume_from and not args.force:
        raise ConfigError(
            f"{command} needs --init-from (a {resume_from[0]} checkpoint); "
            f"pass --force to start from scratch")
    else:
        model = CaptionModel(_model_config(config, ds), seed=seed)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = out.with_suffix(out.suffix + ".log.jsonl")
    log_path.unlink(missing_ok=True)
    tcfg = _train_config(config, seed, log_path)

    runner = {"train-pos": train_pos, "train-xe": train_xe,
              "train-rl": train_scst}[command]
    log.info("%s: %d train clips, seed %d", command,
             len(ds.split("train")), seed)
    result = runner(model, ds, tcfg)

    save_model(out, model, stage=record_stage, seed=seed,
               vocab_tokens=ds.vocab.tokens)
    write_json(out.with_suffix(out.suffix + ".run.json"), {
        "command": command,
        "seed": seed,
        "data": str(args.data),
        "model_config": model.config.to_dict(),
        "train_config": {k: (str(v) if isinstance(v, Path) else v)
                         for k, v in vars(tcfg).items()},
        "best_metric": result.best_metric,
        "best_epoch": result.best_epoch,
        "epochs_run": result.epochs_run,
    })
    write_training_curves(log_path, out.parent, prefix=out.name + ".curves")
    print(json.dumps({"checkpoint": str(out), "stage": record_stage,
                      "best_metric": result.best_metric,
                      "epochs_run": result.epochs_run}, sort_keys=True))
    return 0


def cmd_eval(args, config) -> int:
    seed = _pick(args.seed, config, "seed", 0)
    split = _pick(args.split, config, "split", "test")
    ds = load_dataset(args.data)
    model, meta = load_model(args.ckpt)
    check_data_compat(model, meta, ds)
    scores = evaluate_model(model, ds.split(split), ds.vocab)

    out_dir = Path(args.out) if args.out else Path(args.ckpt).parent
    paths = write_eval_report(scores, out_dir, prefix=f"eval_{split}")
    write_json(out_dir / f"eval_{split}.run.json", {
        "command": "eval", "seed": seed, "split": split,
        "data": str(args.data), "checkpoint": str(args.ckpt),
        "model_config": model.config.to_dict(),
    })
    print(format_table({split: scores}, decimals=1))
    log.info("report written to %s", paths["json"])
    return 0


def _caption_payload(clip_id: str, cap: Caption, beam_width: int) -> dict:
    return {
        "clip_id": clip_id,
        "caption": " ".join(cap.tokens),
        "tokens": cap.tokens,
        "tags": list(cap.tags.tags),
        "logprob": cap.score,
        "terminated": cap.terminated,
        "edited": cap.edited,
        "unused_overrides": list(cap.unused_overrides),
        "beam_width": beam_width,
    }


def cmd_caption(args, config) -> int:
    beam = _pick(args.beam, config, "beam", 1)
    ds = load_dataset(args.data)
    model, meta = load_model(args.ckpt)
    check_data_compat(model, meta, ds)
    ex = _find_clip(ds, args.clip)

    edits = ([_parse_edit(o, "set") for o in args.override or []] +
             [_parse_edit(i, "insert") for i in args.insert or []])
    if edits:
        session = ControlSession(model, ex.clip, ds.vocab, beam_width=beam)
        for op, idx, tag in edits:
            session.apply(op, idx, tag)
        cap = session.current
    else:
        cap = caption_clip(model, ex.clip, ds.vocab, beam_width=beam)

    if args.att_out:
        labels = [t for t in cap.tokens] + (["<end>"] if cap.terminated else [])
        write_attention_figure(cap.attention, labels[:cap.attention.shape[0]],
                               args.att_out, title=args.clip)
    print(json.dumps(_caption_payload(args.clip, cap, beam), sort_keys=True))
    return 0


def _print_session(sess: ControlSession, out) -> None:
    cap = sess.current
    tags = " ".join(f"{i}:{t}" for i, t in enumerate(cap.tags.tags))
    marker = " (edited)" if cap.edited else ""
    out.write(f"tags{marker}: {tags}\n")
    out.write(f"caption: {' '.join(cap.tokens)}\n")
    if cap.unused_overrides:
        out.write(f"note: overrides past the end went unused at "
                  f"{cap.unused_overrides}\n")


def cmd_control(args, config) -> int:
    beam = _pick(args.beam, config, "beam", 1)
    ds = load_dataset(args.data)
    model, meta = load_model(args.ckpt)
    check_data_compat(model, meta, ds)
    ex = _find_clip(ds, args.clip)
    sess = ControlSession(model, ex.clip, ds.vocab, beam_width=beam)

    out = sys.stdout
    out.write(f"clip {args.clip}; commands: show | edit IDX TAG | "
              f"insert IDX TAG | reset | quit\n")
    _print_session(sess, out)
    for line in sys.stdin:
        words = line.split()
        if not words:
            continue
        cmd = words[0].lower()
        try:
            if cmd == "quit":
                break
            elif cmd == "show":
                _print_session(sess, out)
            elif cmd == "reset":
                sess.reset()
                _print_session(sess, out)
            elif cmd in ("edit", "insert"):
                if len(words) != 3 or not words[1].lstrip("-").isdigit():
                    raise DomainError(f"usage: {cmd} IDX TAG")
                op = "set" if cmd == "edit" else "insert"
                sess.apply(op, int(words[1]), words[2].upper())
                _print_session(sess, out)
            else:
                raise DomainError(
                    f"unknown command {cmd!r}; try show, edit, insert, "
                    f"reset, quit")
        except (DomainError, ConfigError) as exc:
            out.write(f"error: {exc}\n")
    return 0


def cmd_serve(args, config) -> int:
    import uvicorn

    from .service import build_app

    addr = _pick(args.addr, config, "addr", "127.0.0.1")
    port = _pick(args.port, config, "port", 8080)
    app = build_app(args.ckpt, args.data)
    uvicorn.run(app, host=addr, port=int(port), log_level="warning")
    return 0


def cmd_ablate(args, config) -> int:
    seed = _pick(args.seed, config, "seed", 0)
    modes = _pick(args.modes, config, "modes",
                  "cross_gating,concat,elementwise_add")
    mode_list = [m.strip() for m in modes.split(",") if m.strip()]
    if not mode_list:
        raise ConfigError("ablate needs at least one fusion mode")
    ds = load_dataset(args.data)
    base = _model_config(config, ds)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    tcfg = _train_config(config, seed, None)

    guided = config.get("guided_mode", "cross_gating")
    results = run_ablation(ds, base, mode_list, xe_cfg=tcfg,
                           guided_mode=guided, eval_split=args.split or "test",
                           log_dir=out_dir / "logs")
    scores = {variant: r["scores"] for variant, r in results.items()}
    write_ablation_report(scores, out_dir)
    write_json(out_dir / "ablation.run.json", {
        "command": "ablate", "seed": seed, "modes": mode_list,
        "guided_mode": guided, "data": str(args.data),
        "model_config": base.to_dict(),
        "best_val": {v: r["best_val"] for v, r in results.items()},
    })
    print(format_table(scores, decimals=1))
    return 0


# -- wiring ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="caplab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        p = sub.add_parser(name, **kw)
        p.set_defaults(fn=fn)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="rng seed (default 0)")
        return p

    p = add("synth", cmd_synth, help="write a synthetic toy corpus")
    p.add_argument("--spec", help="grammar spec JSON (default: built-in)")
    p.add_argument("--out", required=True, help="corpus directory")
    p.add_argument("--n-train", type=int, dest="n_train")
    p.add_argument("--n-val", type=int, dest="n_val")
    p.add_argument("--n-test", type=int, dest="n_test")

    for name, desc in (("train-pos", "stage 1: tag generator"),
                       ("train-xe", "stage 2: word decoder"),
                       ("train-rl", "stage 3: self-critical fine-tuning")):
        p = add(name, lambda a, c, n=name: _run_stage(a, c, n), help=desc)
        p.add_argument("--data", required=True, help="corpus directory")
        p.add_argument("--init-from", dest="init_from",
                       help="checkpoint to continue from")
        p.add_argument("--out", required=True, help="checkpoint to write")
        p.add_argument("--force", action="store_true",
                       help="allow skipping the usual stage order")

    p = add("eval", cmd_eval, help="score a checkpoint on a split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", help="split to score (default test)")
    p.add_argument("--out", help="report directory (default: beside ckpt)")

    p = add("caption", cmd_caption, help="caption one clip")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--clip", required=True, help="clip id")
    p.add_argument("--beam", type=int, help="beam width (default 1 = greedy)")
    p.add_argument("--override", action="append", metavar="TAG@IDX",
                   help="force a tag at a position (repeatable)")
    p.add_argument("--insert", action="append", metavar="TAG@IDX",
                   help="insert a forced tag at a position (repeatable)")
    p.add_argument("--att-out", dest="att_out",
                   help="write the word attention heatmap PNG here")

    p = add("control", cmd_control, help="interactive tag editing session")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--clip", required=True)
    p.add_argument("--beam", type=int)

    p = add("serve", cmd_serve, help="serve the HTTP API over a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--addr", help="bind address (default 127.0.0.1)")
    p.add_argument("--port", type=int, help="port (default 8080)")

    p = add("ablate", cmd_ablate, help="compare fusion modes")
    p.add_argument("--data", required=True)
    p.add_argument("--modes", help="comma-separated fusion modes")
    p.add_argument("--out", default="ablation", help="report directory")
    p.add_argument("--split", help="evaluation split (default test)")

    return parser


def main(argv=None) -> int:
    level = os.environ.get("CAPLAB_LOG", "warning").upper()
    logging.basicConfig(stream=sys.stderr,
                        level=getattr(logging, level, logging.WARNING),
                        format="%(name)s %(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = _load_config(args.config)
        if not isinstance(config.get("seed", 0), int):
            raise ConfigError("config seed must be an integer")
        return args.fn(args, config)
    except SystemExit:
        raise
    except CAPLAB_ERRORS as exc:
        _emit_error(type(exc).__name__, str(exc))
        return 1


if __name__ == "__main__":
    sys.exit(main())
