"""Teacher-forced training with Adam, linear warmup and step decay."""
from __future__ import annotations

import json
import logging
import math
from fractions import Fraction
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import rng as rngmod
from . import tensor as tf
from .dsp import LogMelSpectrogram, SpecAugmentPolicy, spec_augment
from .encoder import calibrate_batch_norm
from .model import CaptionModel
from .tensor import Parameter, Tensor
from .tokenizer import Vocabulary, encode, normalize

log = logging.getLogger(__name__)

LARGE_PRESETS = ("base", "roberta_base")


class TrainingError(ValueError):
    pass


def default_lr(preset: str) -> float:
    return 5e-5 if preset in LARGE_PRESETS else 5e-4


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 30
    warmup_epochs: int = 5
    decay_period: int = 10
    decay_factor: float = 0.1
    base_lr: float = 5e-4
    dropout: float = 0.2
    seed: int = 0
    grad_clip: float | None = None
    freeze_encoder: bool = False
    calibrate_bn: bool = False
    spec_augment: bool = True
    augment: SpecAugmentPolicy = field(default_factory=SpecAugmentPolicy)
    select_metric: str = "loss"  # or "cider"

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.warmup_epochs >= self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")
        if self.select_metric not in ("loss", "cider"):
            raise ValueError(f"unknown selection metric {self.select_metric!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``base_lr`` over the warmup epochs, then step decay.

    Epochs are 1-based. The first decay lands ``decay_period`` epochs after
    warmup ends (epochs 16, 26, ... with the defaults). The arithmetic is done
    on the decimal values with a single final rounding, so 5e-4 * 3 / 5 is
    exactly 3e-4 rather than 3.0000000000000003e-4.
    """
    if epoch < 1:
        raise ValueError(f"epochs are 1-based, got {epoch}")
    base = Fraction(repr(cfg.base_lr))
    if epoch <= cfg.warmup_epochs:
        return float(base * epoch / cfg.warmup_epochs)
    decays = (epoch - cfg.warmup_epochs - 1) // cfg.decay_period
    return float(base * Fraction(repr(cfg.decay_factor)) ** decays)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


class Adam:
    """Bias-corrected Adam without weight decay."""

    def __init__(self, params: Sequence[Parameter], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}
        self.t = 0

    def step(self, lr: float) -> None:
        missing = [p.name for p in self.params if p.grad is None]
        if missing:
            raise TrainingError(f"missing gradient for: {', '.join(missing[:5])}"
                                + (" ..." if len(missing) > 5 else ""))
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p in self.params:
            g = p.grad.astype(p.data.dtype, copy=False)
            m = self.m[p.name] = b1 * self.m[p.name] + (1 - b1) * g
            v = self.v[p.name] = b2 * self.v[p.name] + (1 - b2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def clip_gradients(params: Sequence[Parameter], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


@dataclass
class Example:
    key: str
    spec: LogMelSpectrogram
    ids: list[int]
    caption: str


def encode_caption(text: str, vocab: Vocabulary, max_len: int = 50, allow_unk: bool = False) -> list[int]:
    ids = encode(normalize(text), vocab)
    if not allow_unk and vocab.unk_id in ids:
        raise TrainingError(f"caption has out-of-vocabulary words: {text!r}")
    if len(ids) > max_len + 2:
        raise TrainingError(f"caption of {len(ids) - 2} tokens exceeds the {max_len}-token limit: {text!r}")
    return ids


def make_examples(items, vocab: Vocabulary, max_len: int = 50, allow_unk: bool = False) -> list[Example]:
    """Expand (key, spectrogram, captions) triples into one example per caption."""
    out = []
    for key, spec, captions in items:
        for cap in captions:
            out.append(Example(key, spec, encode_caption(cap, vocab, max_len, allow_unk), normalize(cap)))
    if not out:
        raise TrainingError("dataset is empty")
    return out


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    n = max(len(s) for s in seqs)
    ids = np.full((len(seqs), n), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def _batch_loss(model: CaptionModel, batch: Sequence[Example], features: Tensor, memory_mask,
                training: bool, rng) -> tuple[Tensor, int]:
    ids, mask = pad_batch([ex.ids for ex in batch], model.vocab.pad_id)
    inputs, targets = ids[:, :-1], ids[:, 1:]
    in_mask, tgt_mask = mask[:, :-1], mask[:, 1:]
    logits = model.decode(inputs, features, token_mask=in_mask, memory_mask=memory_mask,
                          training=training, rng=rng)
    count = int(tgt_mask.sum())
    if count == 0:
        raise TrainingError("batch has no non-pad targets")
    return tf.cross_entropy(logits, targets, tgt_mask), count


class Trainer:
    """Owns a model, its optimiser and the per-epoch bookkeeping."""

    def __init__(self, model: CaptionModel, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        if model.cfg.dropout != cfg.dropout:
            model.cfg = model.cfg.with_(dropout=cfg.dropout)
        prefix = "decoder." if cfg.freeze_encoder else ""
        for p in model.parameters("encoder."):
            p.requires_grad = not cfg.freeze_encoder
        self.optimizer = Adam(model.parameters(prefix))
        self._feature_cache: dict[str, np.ndarray] = {}

    def _features(self, batch: Sequence[Example], rng, training: bool) -> tuple[Tensor, np.ndarray]:
        cfg = self.cfg
        augment = training and cfg.spec_augment
        feats = []
        for ex in batch:
            if cfg.freeze_encoder and not augment:
                cached = self._feature_cache.get(ex.key)
                if cached is None:
                    cached = self._feature_cache[ex.key] = self.model.encode(ex.spec, training=False).data
                feats.append(Tensor(cached))
                continue
            spec = spec_augment(ex.spec, cfg.augment, rng) if augment else ex.spec
            feats.append(self.model.encode(spec, training=training and not cfg.freeze_encoder, rng=rng))
        return CaptionModel.stack_features(feats)

    def prepare(self, examples: Sequence[Example]) -> None:
        if self.cfg.calibrate_bn:
            seen = {}
            for ex in examples:
                seen.setdefault(ex.key, ex.spec)
            calibrate_batch_norm(list(seen.values()), self.model.state, self.model.cfg.encoder)
            self._feature_cache.clear()

    def train_epoch(self, examples: Sequence[Example], epoch: int) -> float:
        cfg = self.cfg
        lr = lr_schedule(epoch, cfg)
        order = rngmod.stream(cfg.seed, "shuffle", epoch).permutation(len(examples))
        total, tokens = 0.0, 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [examples[i] for i in order[start:start + cfg.batch_size]]
            rng = rngmod.stream(cfg.seed, "batch", epoch, b)
            features, mem_mask = self._features(batch, rng, training=True)
            loss, count = _batch_loss(self.model, batch, features, mem_mask, True, rng)
            loss.backward()
            if cfg.grad_clip is not None:
                clip_gradients(self.optimizer.params, cfg.grad_clip)
            self.optimizer.step(lr)
            self.model.zero_grad()
            total += loss.item() * count
            tokens += count
        return total / tokens

    def evaluate_loss(self, examples: Sequence[Example]) -> float:
        total, tokens = 0.0, 0
        for start in range(0, len(examples), self.cfg.batch_size):
            batch = list(examples[start:start + self.cfg.batch_size])
            features, mem_mask = self._features(batch, None, training=False)
            loss, count = _batch_loss(self.model, batch, features, mem_mask, False, None)
            total += loss.item() * count
            tokens += count
        return total / tokens

    def encoded_features(self, spec: LogMelSpectrogram, key: str | None = None) -> np.ndarray:
        if key is not None and key in self._feature_cache:
            return self._feature_cache[key]
        return self.model.encode(spec, training=False).data


def select_best(values: Sequence[float], higher_is_better: bool = False) -> int:
    """0-based index of the best value; ties go to the earliest."""
    if not values:
        raise ValueError("no validation values")
    best = 0
    for i, v in enumerate(values):
        if (v > values[best]) if higher_is_better else (v < values[best]):
            best = i
    return best


@dataclass
class TrainResult:
    best_epoch: int
    best_state: dict[str, np.ndarray]
    history: list[dict]


def fit(
    model: CaptionModel,
    train: Sequence[Example],
    val: Sequence[Example] | None,
    cfg: TrainConfig,
    log_path: str | Path | None = None,
    val_metric: Callable[[CaptionModel, "Trainer"], float] | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train for ``cfg.epochs`` epochs, keeping the best state on validation.

    Selection uses validation loss by default. With ``select_metric="cider"``
    ``val_metric`` must return a higher-is-better score. Without a
    validation set the training loss drives selection.
    """
    trainer = Trainer(model, cfg)
    trainer.prepare(list(train) + list(val or []))
    history: list[dict] = []
    best_state = None
    best_value = None
    higher = cfg.select_metric == "cider"
    handle = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            train_loss = trainer.train_epoch(train, epoch)
            record = {"epoch": epoch, "lr": lr_schedule(epoch, cfg), "train_loss": train_loss}
            if val:
                record["val_loss"] = trainer.evaluate_loss(val)
            if higher:
                if val_metric is None:
                    raise TrainingError("select_metric='cider' needs a val_metric callable")
                record["val_cider"] = val_metric(model, trainer)
                value = record["val_cider"]
            else:
                value = record.get("val_loss", train_loss)
            history.append(record)
            better = best_value is None or (value > best_value if higher else value < best_value)
            if better:
                best_value = value
                best_state = {n: t.data.copy() for n, t in model.state.items()}
            log.info("epoch %d lr %.3g train %.4f%s", epoch, record["lr"], train_loss,
                     f" val {record['val_loss']:.4f}" if "val_loss" in record else "")
            if handle:
                handle.write(json.dumps(record) + "\n")
                handle.flush()
            if on_epoch:
                on_epoch(record)
    finally:
        if handle:
            handle.close()
    values = [r["val_cider"] if higher else r.get("val_loss", r["train_loss"]) for r in history]
    best_epoch = select_best(values, higher) + 1
    return TrainResult(best_epoch, best_state, history)
