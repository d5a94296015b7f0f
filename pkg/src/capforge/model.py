"""The full captioning model: CNN10 encoder + BERT-style decoder."""
from __future__ import annotations

import numpy as np

from . import decoder as dec
from . import encoder as enc
from .config import ModelConfig
from .dsp import LogMelSpectrogram
from .tensor import Parameter, Tensor, pad_stack
from .tokenizer import Vocabulary

BUFFER_SUFFIXES = (".running_mean", ".running_var")


def is_buffer(name: str) -> bool:
    return name.endswith(BUFFER_SUFFIXES)


def model_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {**enc.encoder_shapes(cfg.encoder), **dec.decoder_shapes(cfg)}


class CaptionModel:
    """Named state tensors plus the forward passes that read them.

    ``state`` maps every name to a tensor: trainable weights are
    :class:`Parameter` instances, batch-norm running statistics are plain
    tensors. The tied output projection reads ``decoder.embed.tokens``
    directly, so there is no separate classifier matrix to drift.
    """

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary, arrays: dict[str, np.ndarray] | None = None):
        if len(vocab) != cfg.vocab_size:
            raise ValueError(f"vocabulary has {len(vocab)} tokens, config says {cfg.vocab_size}")
        self.cfg = cfg
        self.vocab = vocab
        self.state: dict[str, Tensor] = {}
        shapes = model_shapes(cfg)
        for name, shape in shapes.items():
            data = np.zeros(shape, np.float32) if arrays is None else np.asarray(arrays[name], np.float32)
            if data.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {data.shape}")
            self.state[name] = Tensor(data) if is_buffer(name) else Parameter(data, name)

    # -- bookkeeping ---------------------------------------------------------
    @property
    def soc_id(self) -> int:
        return self.vocab.soc_id

    @property
    def eoc_id(self) -> int:
        return self.vocab.eoc_id

    @property
    def vocab_size(self) -> int:
        return self.cfg.vocab_size

    @property
    def max_len(self) -> int:
        return self.cfg.max_len

    def parameters(self, prefix: str = "") -> list[Parameter]:
        return [t for n, t in self.state.items() if isinstance(t, Parameter) and n.startswith(prefix)]

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.state.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.state.items():
            data = np.asarray(arrays[name], dtype=np.float32)
            if data.shape != t.shape:
                raise ValueError(f"{name}: expected shape {t.shape}, got {data.shape}")
            t.data = data.copy()

    def zero_grad(self) -> None:
        for t in self.state.values():
            t.grad = None

    # -- forward passes --------------------------------------------------------
    def encode(self, spec: LogMelSpectrogram | np.ndarray, training: bool = False,
               rng: np.random.Generator | None = None) -> Tensor:
        return enc.encode(spec, self.state, self.cfg.encoder, training, rng)

    def encode_batch(self, specs, training: bool = False, rng=None) -> tuple[Tensor, np.ndarray]:
        feats = [self.encode(s, training, rng) for s in specs]
        return self.stack_features(feats)

    @staticmethod
    def stack_features(feats: list[Tensor]) -> tuple[Tensor, np.ndarray]:
        lengths = [f.shape[0] for f in feats]
        mask = np.zeros((len(feats), max(lengths)), dtype=bool)
        for i, n in enumerate(lengths):
            mask[i, :n] = True
        return pad_stack(feats), mask

    def decode(self, ids, features: Tensor | None, token_mask=None, memory_mask=None,
               training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        return dec.decoder_forward(ids, features, self.state, self.cfg, token_mask, memory_mask, training, rng)

    # -- step interface used by greedy / beam search ----------------------------
    def start(self, features) -> dec.DecoderState:
        return dec.start_state(features, self.state, self.cfg)

    def step(self, dstate: dec.DecoderState, token: int) -> tuple[np.ndarray, dec.DecoderState]:
        return dec.step(dstate, token, self.state, self.cfg)
