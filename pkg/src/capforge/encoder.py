"""CNN10 audio encoder.

Four blocks of (3x3 conv -> batch norm -> ReLU) x 2 followed by 2x2 average
pooling, then a mean over the remaining frequency bins and two
fully-connected layers (512 -> D -> D). Time resolution drops by 16.
"""
from __future__ import annotations

import numpy as np

from . import tensor as tf
from .config import EncoderConfig
from .dsp import LogMelSpectrogram
from .tensor import BatchNormStats, Tensor


def encoder_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every encoder state tensor, in canonical order."""
    shapes: dict[str, tuple[int, ...]] = {}
    cin = 1
    for b, cout in enumerate(cfg.block_channels):
        for layer in (1, 2):
            pre = f"encoder.block{b}"
            shapes[f"{pre}.conv{layer}.weight"] = (cout, cin if layer == 1 else cout, 3, 3)
            for suffix in ("gamma", "beta", "running_mean", "running_var"):
                shapes[f"{pre}.bn{layer}.{suffix}"] = (cout,)
        cin = cout
    shapes["encoder.fc1.weight"] = (cin, cfg.hidden)
    shapes["encoder.fc1.bias"] = (cfg.hidden,)
    shapes["encoder.fc2.weight"] = (cfg.hidden, cfg.hidden)
    shapes["encoder.fc2.bias"] = (cfg.hidden,)
    return shapes


def output_frames(t: int) -> int:
    return t // 16


def _bn(state: dict[str, Tensor], prefix: str, momentum: float = 0.1) -> BatchNormStats:
    return BatchNormStats(state[f"{prefix}.running_mean"], state[f"{prefix}.running_var"], momentum)


def conv_block(
    x: Tensor, state: dict[str, Tensor], b: int, training: bool, momentum: float = 0.1
) -> Tensor:
    pre = f"encoder.block{b}"
    for layer in (1, 2):
        x = tf.conv2d(x, state[f"{pre}.conv{layer}.weight"])
        x = tf.batch_norm(
            x, _bn(state, f"{pre}.bn{layer}", momentum),
            state[f"{pre}.bn{layer}.gamma"], state[f"{pre}.bn{layer}.beta"], training,
        )
        x = tf.relu(x)
    return tf.avg_pool2d(x)


def encode(
    spec: LogMelSpectrogram | np.ndarray,
    state: dict[str, Tensor],
    cfg: EncoderConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
    bn_momentum: float = 0.1,
) -> Tensor:
    """Map a [T, 64] log-mel spectrogram to features [T // 16, D]."""
    frames = spec.frames if isinstance(spec, LogMelSpectrogram) else np.asarray(spec)
    if frames.ndim != 2 or frames.shape[1] != cfg.input_mels:
        raise ValueError(f"expected [T, {cfg.input_mels}] spectrogram, got {frames.shape}")
    if frames.shape[0] < 16:
        raise ValueError(f"encoder needs at least 16 frames, got {frames.shape[0]}")
    dtype = state["encoder.fc1.weight"].dtype
    x = Tensor(frames[None].astype(dtype, copy=False))  # [1, T, F]
    for b in range(len(cfg.block_channels)):
        x = conv_block(x, state, b, training, bn_momentum)
    x = x.mean(axis=2).transpose()  # [C, T', F'] -> [T', C]
    x = tf.relu(tf.linear(x, state["encoder.fc1.weight"], state["encoder.fc1.bias"]))
    x = tf.dropout(x, cfg.dropout, training, rng)
    return tf.linear(x, state["encoder.fc2.weight"], state["encoder.fc2.bias"])


def calibrate_batch_norm(
    specs, state: dict[str, Tensor], cfg: EncoderConfig
) -> None:
    """Reset running statistics to the average of per-clip batch statistics.

    Used when a randomly initialised encoder is frozen: eval-mode batch norm
    is only meaningful with statistics gathered from real inputs.
    """
    for name, t in state.items():
        if name.startswith("encoder.") and name.endswith(".running_mean"):
            t.data = np.zeros_like(t.data)
        elif name.startswith("encoder.") and name.endswith(".running_var"):
            t.data = np.ones_like(t.data)
    for k, spec in enumerate(specs):
        encode(spec, state, cfg, training=True, rng=np.random.default_rng(0), bn_momentum=1.0 / (k + 1))
