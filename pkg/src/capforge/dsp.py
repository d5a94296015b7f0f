"""Audio front end: WAV decoding, STFT, mel projection, log compression, SpecAugment.

Feature conventions:

* symmetric Hann window of 1024 samples, hop 512, reflect padding of 512 on
  both ends, so a clip of ``n`` samples gives ``1 + n // 512`` frames;
* power spectrum (magnitude squared) into 64 triangular mel filters
  (``mel = 2595 log10(1 + f / 700)``) equally spaced in mel from 0 Hz to
  16 kHz, each with unit peak;
* natural log with a floor of 1e-10.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SAMPLE_RATE = 32000
N_FFT = 1024
HOP = 512
N_MELS = 64
FLOOR_EPS = 1e-10

MELS_MAGIC = b"MELS1\x00\x00\x00"


class AudioFormatError(ValueError):
    """The WAV container or its payload is unsupported or damaged."""


class FeatureFormatError(ValueError):
    """A MELS1 feature file is malformed."""


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class LogMelSpectrogram:
    frames: np.ndarray  # [T, 64], time-major
    frame_rate: float = SAMPLE_RATE / HOP
    floor: float = float(np.log(FLOOR_EPS))

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


# ---------------------------------------------------------------------------
# WAV
# ---------------------------------------------------------------------------


def load_wav(data: bytes, expected_rate: int = SAMPLE_RATE) -> AudioClip:
    """Decode a mono 16-bit little-endian PCM RIFF/WAVE byte string."""
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise AudioFormatError("not a RIFF/WAVE file")
    pos = 12
    fmt = None
    payload = None
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        (size,) = struct.unpack("<I", data[pos + 4:pos + 8])
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise AudioFormatError(f"truncated {chunk_id.decode('latin-1')!r} chunk: "
                                   f"header says {size} bytes, {len(body)} present")
        if chunk_id == b"fmt ":
            if size < 16:
                raise AudioFormatError("fmt chunk too short")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif chunk_id == b"data":
            payload = body
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise AudioFormatError("missing fmt chunk")
    if payload is None:
        raise AudioFormatError("missing data chunk")
    codec, channels, rate, _, _, bits = fmt
    if codec != 1:
        raise AudioFormatError(f"unsupported codec {codec}: only PCM (1) is decoded")
    if channels != 1:
        raise AudioFormatError(f"expected mono audio, got {channels} channels")
    if bits != 16:
        raise AudioFormatError(f"expected 16-bit samples, got {bits}-bit")
    if rate != expected_rate:
        raise AudioFormatError(
            f"sample rate {rate} Hz does not match configured {expected_rate} Hz "
            "(resampling unsupported)"
        )
    if len(payload) % 2:
        raise AudioFormatError("truncated data chunk: odd byte count for 16-bit PCM")
    pcm = np.frombuffer(payload, dtype="<i2")
    return AudioClip(pcm.astype(np.float64) / 32768.0, rate)


def encode_wav(samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> bytes:
    """Encode samples in [-1, 1] as mono PCM16 WAV bytes."""
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    body = pcm.tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(body), b"WAVE",
        b"fmt ", 16, 1, 1, sample_rate, sample_rate * 2, 2, 16,
        b"data", len(body),
    )
    return header + body


# ---------------------------------------------------------------------------
# Spectral analysis
# ---------------------------------------------------------------------------


def hann_window(n: int = N_FFT) -> np.ndarray:
    """Symmetric Hann window 0.5 (1 - cos(2 pi k / (n - 1)))."""
    k = np.arange(n)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * k / (n - 1)))


def num_frames(length: int) -> int:
    return 1 + length // HOP


def stft(clip: AudioClip | np.ndarray, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """Magnitude spectrogram [T, n_fft // 2 + 1] with centred reflect padding."""
    x = np.asarray(clip.samples if isinstance(clip, AudioClip) else clip, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot analyse an empty clip")
    half = n_fft // 2
    padded = np.pad(x, half, mode="reflect") if x.size > 1 else np.pad(x, half, mode="edge")
    count = 1 + (len(padded) - n_fft) // hop
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft)[::hop][:count]
    return np.abs(np.fft.rfft(frames * hann_window(n_fft), axis=-1))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    n_mels: int = N_MELS, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE,
    fmin: float = 0.0, fmax: float | None = None,
) -> np.ndarray:
    """Triangular filters [n_mels, n_fft // 2 + 1] with unit peaks."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.clip(np.minimum(rising, falling), 0.0, None)


def mel_centers(n_mels: int = N_MELS, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    return edges[1:-1]


_FILTERBANK = mel_filterbank()


def mel_project(mag: np.ndarray) -> np.ndarray:
    """Project a magnitude spectrogram's power onto the mel filterbank."""
    mag = np.asarray(mag, dtype=np.float64)
    if mag.ndim != 2 or mag.shape[1] != N_FFT // 2 + 1:
        raise ValueError(f"expected [T, {N_FFT // 2 + 1}] magnitudes, got {mag.shape}")
    return (mag * mag) @ _FILTERBANK.T


def log_compress(mel: np.ndarray, floor_eps: float = FLOOR_EPS) -> LogMelSpectrogram:
    mel = np.asarray(mel, dtype=np.float64)
    if np.any(mel < 0):
        raise ValueError("log_compress expects non-negative energies")
    frames = np.log(np.maximum(mel, floor_eps)).astype(np.float32)
    return LogMelSpectrogram(frames, floor=float(np.float32(np.log(floor_eps))))


def log_mel(clip: AudioClip) -> LogMelSpectrogram:
    return log_compress(mel_project(stft(clip)))


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpecAugmentPolicy:
    num_time_masks: int = 2
    max_time_width: int = 64
    num_freq_masks: int = 2
    max_freq_width: int = 8


def spec_augment(
    spec: LogMelSpectrogram, policy: SpecAugmentPolicy, rng: np.random.Generator
) -> LogMelSpectrogram:
    """Time and frequency masking (no time warping); returns a masked copy.

    Each mask width is uniform in [0, max width], clamped to the extent, and
    its start is uniform over the valid offsets. Masked cells take the log floor.
    """
    frames = spec.frames.copy()
    t, f = frames.shape
    for _ in range(policy.num_time_masks):
        width = min(int(rng.integers(0, policy.max_time_width + 1)), t)
        start = int(rng.integers(0, t - width + 1))
        frames[start:start + width, :] = spec.floor
    for _ in range(policy.num_freq_masks):
        width = min(int(rng.integers(0, policy.max_freq_width + 1)), f)
        start = int(rng.integers(0, f - width + 1))
        frames[:, start:start + width] = spec.floor
    return LogMelSpectrogram(frames, spec.frame_rate, spec.floor)


# ---------------------------------------------------------------------------
# MELS1 feature cache
# ---------------------------------------------------------------------------


def dump_features(spec: LogMelSpectrogram) -> bytes:
    frames = np.ascontiguousarray(spec.frames, dtype="<f4")
    t, m = frames.shape
    return MELS_MAGIC + struct.pack("<II", t, m) + frames.tobytes()


def parse_features(data: bytes) -> LogMelSpectrogram:
    head = len(MELS_MAGIC) + 8
    if data[: len(MELS_MAGIC)] != MELS_MAGIC:
        raise FeatureFormatError("bad magic: not a MELS1 feature file")
    if len(data) < head:
        raise FeatureFormatError("truncated MELS1 header")
    t, m = struct.unpack("<II", data[len(MELS_MAGIC):head])
    if m != N_MELS:
        raise FeatureFormatError(f"expected {N_MELS} mel bins, header says {m}")
    expected = t * m * 4
    if len(data) - head != expected:
        raise FeatureFormatError(
            f"payload length {len(data) - head} does not match {t}x{m} f32 ({expected} bytes)"
        )
    frames = np.frombuffer(data, dtype="<f4", offset=head).reshape(t, m).astype(np.float32)
    return LogMelSpectrogram(frames)


def load_features(path: str | Path, expected_rate: int = SAMPLE_RATE) -> LogMelSpectrogram:
    """Read a MELS1 cache file or featurize a WAV, by content sniffing."""
    data = Path(path).read_bytes()
    if data[:4] == b"RIFF":
        return log_mel(load_wav(data, expected_rate))
    return parse_features(data)
