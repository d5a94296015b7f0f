"""Command-line entry point: featurize, train, caption, evaluate, inspect, ...

Exit codes: 0 success, 1 input error, 2 internal invariant violation.
Options can also come from a flat ``key = value`` file passed with
``--config``; command-line flags take precedence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import checkpoint as ck
from . import experiments as exp
from .config import PRESETS, ModelConfig
from .dsp import (AudioFormatError, FeatureFormatError, dump_features, load_features, load_wav,
                  log_mel)
from .infer import MAX_BEAM, caption
from .metrics import EvalItem, evaluate, make_corpus, words
from .model import CaptionModel
from .rng import default_seed
from .tokenizer import Vocabulary, VocabularyError, decode
from .trainer import TrainConfig, TrainingError, default_lr, fit, make_examples

log = logging.getLogger("capforge")

INPUT_ERRORS = (
    ValueError, FileNotFoundError, IsADirectoryError, PermissionError, KeyError, json.JSONDecodeError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------


def read_config(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def write_config(path: Path, values: dict) -> None:
    lines = [f"{k} = {'' if v is None else v}" for k, v in sorted(values.items())]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _coerce(parser: argparse.ArgumentParser, values: dict[str, str]) -> dict:
    actions = {a.dest: a for a in parser._actions}
    out = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None:
            raise UsageError(f"unknown config key {key!r}")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            out[key] = raw.lower() in ("1", "true", "yes", "on")
        elif raw == "":
            out[key] = None
        else:
            out[key] = action.type(raw) if action.type else raw
    return out


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


def read_jsonl(path: str | Path) -> list[tuple[int, dict]]:
    rows = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if line.strip():
            try:
                rows.append((n, json.loads(line)))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{n}: invalid JSON ({exc.msg})") from None
    return rows


def resolve(base: Path, audio: str) -> Path:
    p = Path(audio)
    return p if p.is_absolute() else base / p


def load_dataset(manifest: str | Path, vocab: Vocabulary, max_len: int):
    path = Path(manifest)
    examples = []
    for n, row in read_jsonl(path):
        try:
            audio = row["audio"]
            spec = load_features(resolve(path.parent, audio))
            examples.extend(make_examples([(audio, spec, row["captions"])], vocab, max_len))
        except (TrainingError, AudioFormatError, FeatureFormatError, KeyError, FileNotFoundError) as exc:
            raise ValueError(f"{path}:{n}: {exc}") from None
    if not examples:
        raise ValueError(f"{path}: no items")
    return examples


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _featurize_one(src: str, dst: str) -> str | None:
    try:
        spec = log_mel(load_wav(Path(src).read_bytes()))
        tmp = Path(dst + ".tmp")
        tmp.write_bytes(dump_features(spec))
        tmp.replace(dst)
        return None
    except (AudioFormatError, OSError) as exc:
        return f"{src}: {exc}"


def cmd_featurize(args) -> int:
    src = Path(args.input)
    if src.is_dir():
        wavs = sorted(src.glob("*.wav"))
    else:
        wavs = [resolve(src.parent, row["audio"]) for _, row in read_jsonl(src)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(str(w), str(out / (w.stem + ".mels"))) for w in wavs]
    todo = [j for j in jobs if not Path(j[1]).exists()]
    if args.jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_featurize_one, *zip(*todo)))
    else:
        results = [_featurize_one(a, b) for a, b in todo]
    errors = [r for r in results if r]
    summary = {"inputs": len(jobs), "written": len(todo) - len(errors),
               "skipped": len(jobs) - len(todo), "errors": errors}
    print(json.dumps(summary, indent=2))
    return 1 if errors else 0


def _vocab_for(args) -> Vocabulary:
    path = args.vocab or Path(args.manifest).parent / "vocab.txt"
    if not Path(path).exists():
        raise UsageError("no --vocab given and no vocab.txt next to the manifest")
    return Vocabulary.load(path)


def _train_config(args, preset: str) -> TrainConfig:
    return TrainConfig(
        batch_size=args.batch_size, epochs=args.epochs, warmup_epochs=args.warmup_epochs,
        decay_period=args.decay_period, decay_factor=args.decay_factor,
        base_lr=args.lr if args.lr is not None else default_lr(preset),
        dropout=args.dropout, seed=args.seed, grad_clip=args.grad_clip,
        freeze_encoder=args.freeze_encoder,
        calibrate_bn=args.calibrate_bn or (args.freeze_encoder and not args.encoder_checkpoint),
        spec_augment=not args.no_spec_augment, select_metric=args.select_metric,
    )


def run_training(args) -> dict:
    """Train per ``args``; returns paths of the written artifacts."""
    if args.init_policy == "pretrained" and not args.bert_checkpoint:
        raise UsageError("--init-policy pretrained requires --bert-checkpoint")
    vocab = _vocab_for(args)
    mcfg = ModelConfig.from_preset(args.model, len(vocab), dropout=args.dropout)
    tcfg = _train_config(args, args.model)
    train = load_dataset(args.manifest, vocab, mcfg.max_len)
    val = load_dataset(args.val_manifest, vocab, mcfg.max_len) if args.val_manifest else None

    checkpoint: dict[str, np.ndarray] = {}
    if args.encoder_checkpoint:
        tensors, _ = ck.load_file(args.encoder_checkpoint)
        checkpoint.update({k: v for k, v in tensors.items() if k.startswith("encoder.")})
    if args.bert_checkpoint:
        tensors, _ = ck.load_file(args.bert_checkpoint)
        checkpoint.update({k: v for k, v in tensors.items() if k.startswith("decoder.")})
    enc_pre = bool(args.encoder_checkpoint)
    if args.init_policy == "pretrained":
        policy = ck.InitPolicy.pretrained_decoder(seed=args.seed, encoder_pretrained=enc_pre)
    else:
        policy = ck.InitPolicy.random_decoder(seed=args.seed, encoder_pretrained=enc_pre)

    model = CaptionModel(mcfg, vocab)
    audit = ck.apply_init_policy(model, checkpoint, policy)
    if audit["mismatches"]:
        raise AssertionError(f"init audit mismatches after apply: {audit['mismatches']}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    values = resolved(args)
    values.update({"base_lr": tcfg.base_lr, "calibrate_bn": tcfg.calibrate_bn})
    write_config(out / "run_config.txt", values)
    (out / "init_audit.json").write_text(json.dumps(audit, indent=2) + "\n", encoding="utf-8")

    result = fit(model, train, val, tcfg, log_path=out / "train_log.jsonl",
                 val_metric=_cider_metric(val) if tcfg.select_metric == "cider" else None)
    model.load_arrays(result.best_state)
    meta = {
        "train": {k: v for k, v in tcfg.to_dict().items() if k != "augment"},
        "augment": tcfg.to_dict()["augment"],
        "init_policy": policy.to_dict(),
        "init_counts": audit["counts"],
        "best_epoch": result.best_epoch,
    }
    (out / "best.acpt").write_bytes(ck.save_model(model, meta))
    return {"checkpoint": str(out / "best.acpt"), "best_epoch": result.best_epoch,
            "history": result.history}


def _cider_metric(val):
    from .experiments import decode_examples, score_predictions

    def metric(model, trainer):
        feats = {ex.key: trainer.encoded_features(ex.spec, ex.key) for ex in val}
        return score_predictions(decode_examples(model, val, 1, feats), val)["scores"]["cider"]

    return metric


def cmd_train(args) -> int:
    info = run_training(args)
    print(json.dumps({k: info[k] for k in ("checkpoint", "best_epoch")}))
    return 0


def _load_checkpoint_model(path, preset: str | None = None) -> CaptionModel:
    model, meta = ck.load_model(Path(path).read_bytes())
    if preset and model.cfg.preset != preset:
        raise ValueError(f"checkpoint was trained as {model.cfg.preset!r}, not {preset!r}")
    return model


_WORKER_MODEL: CaptionModel | None = None


def _init_caption_worker(checkpoint: str) -> None:
    global _WORKER_MODEL
    _WORKER_MODEL = _load_checkpoint_model(checkpoint)


def _caption_one(model: CaptionModel, key: str, path: Path, beam: int) -> dict:
    feats = model.encode(load_features(path)).data
    ids, score = caption(model, feats, beam, model.max_len)
    return {"audio": key, "caption": decode(ids, model.vocab), "score": score}


def _caption_in_worker(key: str, path: Path, beam: int) -> dict:
    return _caption_one(_WORKER_MODEL, key, path, beam)


def caption_items(model: CaptionModel, audio_arg: str, beam: int, jobs: int = 1,
                  checkpoint: str | None = None) -> list[dict]:
    """Caption a file or every clip of a manifest, in input order.

    With ``jobs`` > 1 each worker process loads ``checkpoint`` once.
    """
    src = Path(audio_arg)
    if src.suffix == ".jsonl":
        entries = [(row["audio"], resolve(src.parent, row["audio"])) for _, row in read_jsonl(src)]
    else:
        entries = [(audio_arg, src)]
    if jobs > 1 and len(entries) > 1 and checkpoint:
        keys, paths = zip(*entries)
        with ProcessPoolExecutor(jobs, initializer=_init_caption_worker, initargs=(checkpoint,)) as pool:
            return list(pool.map(_caption_in_worker, keys, paths, [beam] * len(keys)))
    return [_caption_one(model, key, path, beam) for key, path in entries]


def cmd_caption(args) -> int:
    if not 1 <= args.beam <= MAX_BEAM:
        raise UsageError(f"--beam must be between 1 and {MAX_BEAM}, got {args.beam}")
    model = _load_checkpoint_model(args.checkpoint, args.model)
    rows = caption_items(model, args.audio, args.beam, args.jobs, args.checkpoint)
    _emit("\n".join(json.dumps(r) for r in rows) + "\n", args.out)
    return 0


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def aligned_corpus(predictions: str | Path, references: str | Path) -> list[EvalItem]:
    preds = {row["audio"]: row["caption"] for _, row in read_jsonl(predictions)}
    refs = {row["audio"]: row["captions"] for _, row in read_jsonl(references)}
    if len(preds) != len(refs) or preds.keys() != refs.keys():
        for key in refs:
            if key not in preds:
                raise ValueError(f"{len(preds)} predictions vs {len(refs)} references; "
                                 f"no prediction for {key!r}")
        for key in preds:
            if key not in refs:
                raise ValueError(f"{len(preds)} predictions vs {len(refs)} references; "
                                 f"no references for {key!r}")
    return make_corpus([(preds[k], refs[k]) for k in refs])


def cmd_evaluate(args) -> int:
    if args.corpus:
        corpus = [EvalItem(words(row["candidate"]), tuple(words(r) for r in row["references"]))
                  for _, row in read_jsonl(args.corpus)]
    elif args.predictions and args.references:
        corpus = aligned_corpus(args.predictions, args.references)
    else:
        raise UsageError("give --corpus, or both --predictions and --references")
    report = evaluate(corpus, args.spice)
    _emit(json.dumps(report, indent=2) + "\n", args.out)
    return 0


def cmd_inspect(args) -> int:
    manifest, _ = ck.read_manifest(Path(args.checkpoint).read_bytes())
    meta = manifest.get("metadata", {})
    info = {
        "format_version": manifest["format_version"],
        "tensors": [{"name": e["name"], "shape": e["shape"]} for e in manifest["entries"]],
        "parameter_count": int(sum(np.prod(e["shape"]) for e in manifest["entries"])),
        "model": meta.get("model"),
        "init_policy": meta.get("init_policy"),
        "init_counts": meta.get("init_counts"),
        "best_epoch": meta.get("best_epoch"),
    }
    print(json.dumps(info, indent=2))
    return 0


def cmd_generate(args) -> int:
    manifest = exp.generate(args.n, args.seed, args.out, args.min_seconds, args.max_seconds, args.prefix)
    print(json.dumps({"manifest": str(manifest)}))
    return 0


def cmd_pretrain_lm(args) -> int:
    vocab = Vocabulary.load(args.vocab) if args.vocab else exp.toy_vocabulary()
    mcfg = ModelConfig.from_preset(args.model, len(vocab))
    texts = exp.text_corpus(args.n_texts, args.seed)
    tensors = exp.pretrain_language_model(mcfg, vocab, texts, args.epochs, seed=args.seed)
    meta = {"source": "toy causal LM", "model": mcfg.to_dict(), "vocab": list(vocab.tokens)}
    ck.save_file(args.out, tensors, meta)
    print(json.dumps({"checkpoint": args.out, "tensors": len(tensors)}))
    return 0


def cmd_repeat(args) -> int:
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not seeds:
        raise UsageError("--seeds needs at least one seed")
    eval_manifest = args.eval_manifest or args.val_manifest
    if not eval_manifest:
        raise UsageError("repeat needs --eval-manifest or --val-manifest")
    base = Path(args.out)
    reports = []
    for seed in seeds:
        run = replace_ns(args, seed=seed, out=str(base / f"seed_{seed}"))
        info = run_training(run)
        model = _load_checkpoint_model(info["checkpoint"])
        preds = caption_items(model, eval_manifest, args.beam)
        pred_path = Path(run.out) / "predictions.jsonl"
        pred_path.write_text("".join(json.dumps(p) + "\n" for p in preds), encoding="utf-8")
        report = evaluate(aligned_corpus(pred_path, eval_manifest))
        report["seed"] = seed
        reports.append(report)
    summary = exp.summarize(reports)
    table = exp.render_table({f"{args.model} ({len(seeds)} seeds)": summary})
    (base / "repeat_report.json").write_text(
        json.dumps({"seeds": seeds, "reports": reports, "summary": summary}, indent=2) + "\n", encoding="utf-8")
    print(table)
    return 0


def replace_ns(ns: argparse.Namespace, **changes) -> argparse.Namespace:
    d = dict(vars(ns))
    d.update(changes)
    return argparse.Namespace(**d)


def cmd_ablation(args) -> int:
    train = TrainConfig(batch_size=args.batch_size, epochs=args.epochs, warmup_epochs=args.warmup_epochs,
                        decay_period=args.decay_period, base_lr=args.lr or default_lr(args.model),
                        freeze_encoder=True, calibrate_bn=True, spec_augment=False)
    cfg = exp.AblationConfig(
        preset=args.model, n_train=args.n_train, n_val=args.n_val,
        seeds=tuple(int(s) for s in args.seeds.split(",")), data_seed=args.data_seed,
        lm_epochs=args.lm_epochs, beam=args.beam, train=train,
    )
    result = exp.run_ablation(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    (out / "ablation.txt").write_text(result["table"] + "\n", encoding="utf-8")
    print(result["table"])
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_train_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True)
    p.add_argument("--val-manifest")
    p.add_argument("--vocab")
    p.add_argument("--model", default="tiny", choices=sorted(PRESETS))
    p.add_argument("--bert-checkpoint")
    p.add_argument("--encoder-checkpoint")
    p.add_argument("--init-policy", default="random", choices=["pretrained", "random"])
    p.add_argument("--freeze-encoder", action="store_true")
    p.add_argument("--calibrate-bn", action="store_true")
    p.add_argument("--seed", type=int, default=default_seed())
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--warmup-epochs", type=int, default=5)
    p.add_argument("--decay-period", type=int, default=10)
    p.add_argument("--decay-factor", type=float, default=0.1)
    p.add_argument("--lr", type=float)
    p.add_argument("--dropout", type=float, default=0.2)
    p.add_argument("--grad-clip", type=float)
    p.add_argument("--no-spec-augment", action="store_true")
    p.add_argument("--select-metric", default="loss", choices=["loss", "cider"])
    p.add_argument("--out", required=True)


def build_parser() -> _Parser:
    parser = _Parser(prog="capforge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("featurize", help="WAV -> MELS1 log-mel feature files")
    p.add_argument("--in", dest="input", required=True, help="directory of WAVs or a manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="train a captioning model")
    p.add_argument("--config")
    _add_train_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("caption", help="caption audio with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--audio", required=True, help="WAV/MELS1 file or JSONL manifest")
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--model", choices=sorted(PRESETS))
    p.add_argument("--jobs", type=int, default=1, help="worker processes, one clip at a time each")
    p.add_argument("--out")
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("evaluate", help="score predicted captions")
    p.add_argument("--predictions")
    p.add_argument("--references")
    p.add_argument("--corpus", help='JSONL of {"candidate", "references"}')
    p.add_argument("--spice", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect", help="print a checkpoint's tensors and init audit")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("generate", help="write a synthetic tone/noise corpus")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--seed", type=int, default=default_seed())
    p.add_argument("--out", required=True)
    p.add_argument("--min-seconds", type=float, default=2.0)
    p.add_argument("--max-seconds", type=float, default=10.0)
    p.add_argument("--prefix", default="clip")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain-lm", help="toy causal-LM checkpoint shaped like a converted BERT")
    p.add_argument("--vocab")
    p.add_argument("--model", default="tiny", choices=sorted(PRESETS))
    p.add_argument("--n-texts", type=int, default=512)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--seed", type=int, default=default_seed())
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain_lm)

    p = sub.add_parser("repeat", help="train/evaluate over several seeds; mean and std table")
    p.add_argument("--config")
    p.add_argument("--seeds", required=True, help="comma-separated, e.g. 1,2,3")
    p.add_argument("--eval-manifest")
    p.add_argument("--beam", type=int, default=1)
    _add_train_args(p)
    p.set_defaults(func=cmd_repeat)

    p = sub.add_parser("ablation", help="pretrained vs random decoder on synthetic data")
    p.add_argument("--model", default="tiny", choices=sorted(PRESETS))
    p.add_argument("--n-train", type=int, default=48)
    p.add_argument("--n-val", type=int, default=16)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--data-seed", type=int, default=1234)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--warmup-epochs", type=int, default=2)
    p.add_argument("--decay-period", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lm-epochs", type=int, default=10)
    p.add_argument("--lr", type=float)
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablation)
    return parser


def config_path(args) -> Path | None:
    """Where a subcommand's resolved configuration is recorded, if anywhere."""
    out = getattr(args, "out", None)
    if args.command in ("train", "repeat", "inspect") or not out:
        return None  # train/repeat write run_config.txt per run; inspect is read-only
    if args.command in ("featurize", "generate", "ablation"):
        return Path(out) / f"{args.command}_config.txt"
    return Path(out + ".config.txt")


def resolved(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func", "config")}


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**_coerce(sub, read_config(args.config)))
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        where = config_path(args)
        if where is not None:
            where.parent.mkdir(parents=True, exist_ok=True)
            write_config(where, resolved(args))
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ck.CheckpointError, ck.InitPolicyError, VocabularyError, AudioFormatError,
            FeatureFormatError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except AssertionError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 2
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("unexpected failure")
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
