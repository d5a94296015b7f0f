"""Desk-scale experiments: a synthetic captioning corpus and the init ablation.

Clips are built from tone / noise / silence segments and captioned by a
small grammar ("a high tone then soft noise"). The ablation trains the same
model twice per seed, once with the decoder loaded from a toy
"pretrained" causal language model and once with a random decoder.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ck
from . import rng as rngmod
from . import tensor as tf
from .config import ModelConfig
from .dsp import SAMPLE_RATE, AudioClip, encode_wav, log_mel
from .infer import beam_search, greedy_decode
from .metrics import METRIC_COLUMNS, evaluate, make_corpus
from .model import CaptionModel
from .tokenizer import PAD, UNK, Vocabulary, decode, encode
from .trainer import Adam, Example, TrainConfig, fit, make_examples, pad_batch

log = logging.getLogger(__name__)

GRAMMAR_WORDS = (
    "a", "an", "high", "low", "pitched", "tone", "beep", "loud", "soft", "noise", "hiss",
    "silence", "quiet", "pause", "then", "followed", "by", "and", "short", "long",
)
BASE_SPECIALS = (PAD, UNK, "[CLS]", "[SEP]", "[MASK]")
PITCH_HZ = {"high": 1800.0, "low": 300.0}
NOISE_LEVEL = {"loud": 0.3, "soft": 0.04}


def toy_vocabulary() -> Vocabulary:
    return Vocabulary.from_tokens(BASE_SPECIALS + GRAMMAR_WORDS)


# ---------------------------------------------------------------------------
# Synthetic clips
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    kind: str  # tone | noise | silence
    quality: str | None  # high/low for tones, loud/soft for noise
    seconds: float


def phrase(seg: Segment) -> str:
    if seg.kind == "tone":
        return f"a {seg.quality} tone"
    if seg.kind == "noise":
        return f"{seg.quality} noise"
    return "silence"


def caption_for(recipe: list[Segment]) -> str:
    return " then ".join(phrase(s) for s in recipe)


def random_recipe(gen: np.random.Generator, min_seconds: float = 2.0, max_seconds: float = 10.0) -> list[Segment]:
    count = int(gen.integers(1, 4))
    total = float(gen.uniform(min_seconds, max_seconds))
    weights = gen.uniform(0.5, 1.5, size=count)
    lengths = total * weights / weights.sum()
    recipe = []
    prev = None
    for secs in lengths:
        kinds = [k for k in ("tone", "noise", "silence") if k != prev]
        kind = kinds[int(gen.integers(len(kinds)))]
        quality = None
        if kind == "tone":
            quality = ("high", "low")[int(gen.integers(2))]
        elif kind == "noise":
            quality = ("loud", "soft")[int(gen.integers(2))]
        recipe.append(Segment(kind, quality, float(secs)))
        prev = kind
    return recipe


def render(recipe: list[Segment], gen: np.random.Generator, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    parts = []
    for seg in recipe:
        n = int(round(seg.seconds * sample_rate))
        if seg.kind == "tone":
            t = np.arange(n) / sample_rate
            parts.append(0.5 * np.sin(2 * np.pi * PITCH_HZ[seg.quality] * t))
        elif seg.kind == "noise":
            parts.append(np.clip(gen.standard_normal(n) * NOISE_LEVEL[seg.quality], -1.0, 1.0))
        else:
            parts.append(np.zeros(n))
    return np.concatenate(parts)


@dataclass
class SyntheticItem:
    key: str
    recipe: list[Segment]
    caption: str
    samples: np.ndarray


def synthesize(n: int, seed: int, min_seconds: float = 2.0, max_seconds: float = 10.0,
               prefix: str = "clip") -> list[SyntheticItem]:
    if n < 1:
        raise ValueError("need at least one item")
    items = []
    for i in range(n):
        gen = rngmod.stream(seed, "synthetic", i)
        recipe = random_recipe(gen, min_seconds, max_seconds)
        items.append(SyntheticItem(f"{prefix}_{i:04d}", recipe, caption_for(recipe), render(recipe, gen)))
    return items


def generate(n: int, seed: int, out_dir: str | Path, min_seconds: float = 2.0,
             max_seconds: float = 10.0, prefix: str = "clip") -> Path:
    """Write WAVs, ``manifest.jsonl`` and ``vocab.txt``; returns the manifest path.

    Manifest audio paths are relative to the manifest's directory so the
    output bytes do not depend on where it is written.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for item in synthesize(n, seed, min_seconds, max_seconds, prefix):
        name = f"{item.key}.wav"
        (out / name).write_bytes(encode_wav(item.samples))
        lines.append(json.dumps({"audio": name, "captions": [item.caption]}))
    manifest = out / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    toy_vocabulary().save(out / "vocab.txt")
    return manifest


def text_corpus(n: int, seed: int) -> list[str]:
    gen = rngmod.stream(seed, "text-corpus")
    return [caption_for(random_recipe(gen)) for _ in range(n)]


# ---------------------------------------------------------------------------
# Toy language-model pretraining (stand-in for a BERT checkpoint)
# ---------------------------------------------------------------------------


def pretrain_language_model(cfg: ModelConfig, vocab: Vocabulary, texts: list[str], epochs: int = 20,
                            lr: float = 1e-3, batch_size: int = 32, seed: int = 0) -> dict[str, np.ndarray]:
    """Causal LM training of the decoder without cross-attention.

    Returns a checkpoint-style dict that looks like a converted BERT model:
    no cross-attention tensors and no rows for <soc>/<eoc>.
    """
    model = CaptionModel(cfg, vocab)
    ck.random_init(model, seed)
    params = [p for p in model.parameters("decoder.") if ".crossattn." not in p.name]
    opt = Adam(params)
    seqs = [[vocab.index["[CLS]"]] + encode(t, vocab)[1:-1] + [vocab.index["[SEP]"]] for t in texts]
    for epoch in range(1, epochs + 1):
        order = rngmod.stream(seed, "lm-shuffle", epoch).permutation(len(seqs))
        for b, start in enumerate(range(0, len(order), batch_size)):
            batch = [seqs[i] for i in order[start:start + batch_size]]
            ids, mask = pad_batch(batch, vocab.pad_id)
            logits = model.decode(ids[:, :-1], None, token_mask=mask[:, :-1], training=True,
                                  rng=rngmod.stream(seed, "lm-batch", epoch, b))
            loss = tf.cross_entropy(logits, ids[:, 1:], mask[:, 1:])
            loss.backward()
            opt.step(lr)
            model.zero_grad()
    keep = [i for i in range(len(vocab)) if i not in (vocab.soc_id, vocab.eoc_id)]
    out = {}
    for name, t in model.state.items():
        if not name.startswith("decoder.") or ".crossattn." in name:
            continue
        data = t.data
        if name in ("decoder.embed.tokens", "decoder.head.bias"):
            data = data[keep]
        out[name] = data.copy()
    return out


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------


@dataclass
class AblationConfig:
    preset: str = "tiny"
    n_train: int = 48
    n_val: int = 16
    seeds: tuple[int, ...] = (0, 1, 2)
    data_seed: int = 1234
    min_seconds: float = 2.0
    max_seconds: float = 4.0
    lm_corpus: int = 512
    lm_epochs: int = 10
    beam: int = 1
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        batch_size=8, epochs=20, warmup_epochs=2, decay_period=10, freeze_encoder=True,
        calibrate_bn=True, spec_augment=False))


def _examples(items: list[SyntheticItem], vocab: Vocabulary, max_len: int) -> list[Example]:
    triples = [(it.key, log_mel(AudioClip(it.samples)), [it.caption]) for it in items]
    return make_examples(triples, vocab, max_len)


def decode_examples(model: CaptionModel, examples: list[Example], beam: int = 1,
                    features: dict[str, np.ndarray] | None = None) -> dict[str, str]:
    out = {}
    for ex in examples:
        if ex.key in out:
            continue
        feats = features[ex.key] if features and ex.key in features else model.encode(ex.spec).data
        if beam == 1:
            ids = greedy_decode(model, feats, model.max_len)
        else:
            ids = list(beam_search(model, feats, beam, model.max_len)[0].ids)
        out[ex.key] = decode(ids, model.vocab)
    return out


def score_predictions(predictions: dict[str, str], examples: list[Example], spice: float | None = None) -> dict:
    refs: dict[str, list[str]] = {}
    for ex in examples:
        refs.setdefault(ex.key, []).append(ex.caption)
    corpus = make_corpus([(predictions[k], refs[k]) for k in sorted(refs)])
    return evaluate(corpus, spice)


def summarize(reports: list[dict]) -> dict:
    """Mean and (population) standard deviation per metric, x100 scale."""
    table = {}
    for col in METRIC_COLUMNS:
        vals = [r["x100"][col] for r in reports if col in r["x100"]]
        if vals:
            table[col] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
    return table


def render_table(rows: dict[str, dict]) -> str:
    header = ["model"] + [c.upper() if c.startswith("bleu") else c for c in METRIC_COLUMNS]
    lines = [" | ".join(header)]
    for name, table in rows.items():
        cells = [name]
        for col in METRIC_COLUMNS:
            cells.append(f"{table[col]['mean']:.1f} ({table[col]['std']:.1f})" if col in table else "-")
        lines.append(" | ".join(cells))
    return "\n".join(lines)


def run_ablation(cfg: AblationConfig) -> dict:
    vocab = toy_vocabulary()
    mcfg = ModelConfig.from_preset(cfg.preset, len(vocab), dropout=cfg.train.dropout)
    train_items = synthesize(cfg.n_train, cfg.data_seed, cfg.min_seconds, cfg.max_seconds, "train")
    val_items = synthesize(cfg.n_val, cfg.data_seed + 1, cfg.min_seconds, cfg.max_seconds, "val")
    train = _examples(train_items, vocab, mcfg.max_len)
    val = _examples(val_items, vocab, mcfg.max_len)

    lm = pretrain_language_model(mcfg, vocab, text_corpus(cfg.lm_corpus, cfg.data_seed), cfg.lm_epochs,
                                 seed=cfg.data_seed)
    encoder_model = CaptionModel(mcfg, vocab)
    ck.init_encoder(encoder_model, seed=cfg.data_seed)
    checkpoint = {**{n: t.data.copy() for n, t in encoder_model.state.items() if n.startswith("encoder.")}, **lm}

    arms = {"pretrained": ck.InitPolicy.pretrained_decoder, "random": ck.InitPolicy.random_decoder}
    result = {"config": _config_dict(cfg), "arms": {}}
    for arm, make_policy in arms.items():
        reports, audits = [], []
        for seed in cfg.seeds:
            model = CaptionModel(mcfg, vocab)
            policy = make_policy(seed=seed)
            audit = ck.apply_init_policy(model, checkpoint, policy)
            tcfg = replace(cfg.train, seed=seed)
            res = fit(model, train, val, tcfg)
            model.load_arrays(res.best_state)
            preds = decode_examples(model, val, cfg.beam)
            report = score_predictions(preds, val)
            report["best_epoch"] = res.best_epoch
            report["seed"] = seed
            reports.append(report)
            audits.append({k: audit[k] for k in ("total", "counts", "mismatches")})
            log.info("%s seed %d: %s", arm, seed, report["x100"])
        result["arms"][arm] = {"reports": reports, "summary": summarize(reports), "audits": audits}
    result["table"] = render_table({arm: r["summary"] for arm, r in result["arms"].items()})
    return result


def _config_dict(cfg: AblationConfig) -> dict:
    d = asdict(cfg)
    d["seeds"] = list(cfg.seeds)
    return d
