"""ACPT1 named-tensor files and the pretrained/random initialisation policy.

File layout (all little-endian)::

    8 bytes   magic b"ACPT1\\0\\0\\0"
    u64       length of the JSON manifest in bytes
    manifest  UTF-8 JSON: {"format_version": 1, "entries": [...], "metadata": {...}}
    payload   concatenated float32 tensors

Each entry is ``{"name", "dtype": "f32", "shape", "offset"}`` with ``offset``
counted from the start of the payload. Tensors are written in the order
given, back to back.
"""
from __future__ import annotations

import fnmatch
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .model import CaptionModel, is_buffer
from .tokenizer import EOC, SOC

MAGIC = b"ACPT1\x00\x00\x00"
FORMAT_VERSION = 1
INIT_STD = 0.02


class CheckpointError(ValueError):
    pass


class InitPolicyError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Serialisation
# ---------------------------------------------------------------------------


def save(tensors: dict[str, np.ndarray], metadata: dict | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        a = np.asarray(arr)
        if not np.all(np.isfinite(a)):
            raise CheckpointError(f"{name}: refusing to save non-finite values")
        raw = np.ascontiguousarray(a, dtype="<f4").tobytes()
        entries.append({"name": name, "dtype": "f32", "shape": list(a.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format_version": FORMAT_VERSION, "entries": entries, "metadata": metadata or {}}
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def read_manifest(data: bytes) -> tuple[dict, int]:
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic: not an ACPT1 checkpoint")
    if len(data) < len(MAGIC) + 8:
        raise CheckpointError("truncated checkpoint header")
    (hlen,) = struct.unpack("<Q", data[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if len(data) < start + hlen:
        raise CheckpointError("truncated checkpoint manifest")
    try:
        manifest = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {manifest.get('format_version')!r}")
    return manifest, start + hlen


def load(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    """Parse ACPT1 bytes into (name -> float32 array, metadata)."""
    manifest, base = read_manifest(data)
    payload = len(data) - base
    tensors: dict[str, np.ndarray] = {}
    end = 0
    for e in manifest["entries"]:
        name = e["name"]
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        if e.get("dtype") != "f32":
            raise CheckpointError(f"{name}: unsupported dtype {e.get('dtype')!r}")
        shape = tuple(int(s) for s in e["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        off = int(e["offset"])
        if off != end:
            raise CheckpointError(f"{name}: offset {off} overlaps or leaves a gap (expected {end})")
        if off + nbytes > payload:
            raise CheckpointError(
                f"{name}: shape {list(shape)} needs {nbytes} bytes at offset {off}, "
                f"payload has {payload - off}"
            )
        tensors[name] = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=base + off).reshape(shape).astype(np.float32)
        end = off + nbytes
    if end != payload:
        raise CheckpointError(f"payload length {payload} does not match manifest total {end}")
    return tensors, manifest.get("metadata", {})


def save_file(path: str | Path, tensors: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    Path(path).write_bytes(save(tensors, metadata))


def load_file(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return load(Path(path).read_bytes())


def save_model(model: CaptionModel, extra: dict | None = None) -> bytes:
    meta = {"model": model.cfg.to_dict(), "vocab": list(model.vocab.tokens)}
    if extra:
        meta.update(extra)
    return save(model.arrays(), meta)


def load_model(data: bytes) -> tuple[CaptionModel, dict]:
    from .config import ModelConfig
    from .tokenizer import Vocabulary

    tensors, meta = load(data)
    if "model" not in meta or "vocab" not in meta:
        raise CheckpointError("checkpoint lacks model config / vocabulary metadata")
    cfg = ModelConfig.from_dict(meta["model"])
    vocab = Vocabulary(tuple(meta["vocab"]))
    missing = [n for n in CaptionModel(cfg, vocab).state if n not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint is missing tensors: {', '.join(missing)}")
    return CaptionModel(cfg, vocab, tensors), meta


# ---------------------------------------------------------------------------
# Random initialisation
# ---------------------------------------------------------------------------


def truncated_normal(gen: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """N(0, std^2) truncated at +-2 std by redrawing rejected values."""
    out = gen.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = gen.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(np.float32)


def random_tensor(name: str, shape: tuple[int, ...], seed: int) -> np.ndarray:
    """Deterministic fresh value for one named tensor.

    The draw depends only on (seed, name), so it can be replayed later.
    Norm scales are 1, shifts and biases 0; encoder conv/fc weights are
    Kaiming-uniform over fan-in; every other decoder weight is a
    truncated normal with std 0.02.
    """
    leaf = name.rsplit(".", 1)[-1]
    if leaf in ("gamma", "running_var"):
        return np.ones(shape, np.float32)
    if leaf in ("beta", "running_mean", "bias") or (name.startswith("decoder.") and leaf.startswith("b")):
        return np.zeros(shape, np.float32)
    gen = rngmod.stream(seed, "init", name)
    if name.startswith("encoder."):
        fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
        bound = np.sqrt(6.0 / fan_in)
        return gen.uniform(-bound, bound, size=shape).astype(np.float32)
    return truncated_normal(gen, shape)


def random_init(model: CaptionModel, seed: int, prefix: str = "") -> None:
    for name, t in model.state.items():
        if name.startswith(prefix):
            t.data = random_tensor(name, t.shape, seed)


def init_encoder(model: CaptionModel, seed: int | None = None, checkpoint: dict[str, np.ndarray] | None = None) -> None:
    """Fill encoder tensors from ``checkpoint`` (bit-exact) or a seeded draw."""
    names = [n for n in model.state if n.startswith("encoder.")]
    if checkpoint is None:
        if seed is None:
            raise ValueError("init_encoder needs a seed or a checkpoint")
        random_init(model, seed, "encoder.")
        return
    problems = []
    for n in names:
        if n not in checkpoint:
            problems.append(f"{n} (missing)")
        elif tuple(checkpoint[n].shape) != model.state[n].shape:
            problems.append(f"{n} (shape {tuple(checkpoint[n].shape)} != {model.state[n].shape})")
    if problems:
        raise InitPolicyError("encoder checkpoint mismatch: " + "; ".join(problems))
    for n in names:
        model.state[n].data = np.array(checkpoint[n], dtype=np.float32)


# ---------------------------------------------------------------------------
# Init policy
# ---------------------------------------------------------------------------


def _matches(name: str, pattern: str) -> bool:
    return fnmatch.fnmatchcase(name, pattern) or fnmatch.fnmatchcase(name, pattern + ".*")


@dataclass
class InitPolicy:
    """Which tensors come from a checkpoint and which are drawn fresh.

    A name in ``random_prefixes`` is random even if it also matches a
    pretrained prefix. Tensors listed in ``boundary_rows`` have their
    <soc>/<eoc> rows drawn fresh while the remaining rows are loaded.
    """

    pretrained_prefixes: list[str] = field(default_factory=lambda: ["encoder", "decoder"])
    random_prefixes: list[str] = field(default_factory=lambda: ["decoder.*.crossattn"])
    boundary_rows: list[str] = field(default_factory=lambda: ["decoder.embed.tokens", "decoder.head.bias"])
    seed: int = 0

    @classmethod
    def pretrained_decoder(cls, seed: int = 0, encoder_pretrained: bool = True) -> "InitPolicy":
        random = ["decoder.*.crossattn"] + ([] if encoder_pretrained else ["encoder"])
        return cls(random_prefixes=random, seed=seed)

    @classmethod
    def all_random(cls, seed: int = 0) -> "InitPolicy":
        return cls(pretrained_prefixes=[], random_prefixes=["encoder", "decoder"], boundary_rows=[], seed=seed)

    @classmethod
    def random_decoder(cls, seed: int = 0, encoder_pretrained: bool = True) -> "InitPolicy":
        return cls(
            pretrained_prefixes=["encoder"] if encoder_pretrained else [],
            random_prefixes=["decoder"] + ([] if encoder_pretrained else ["encoder"]),
            boundary_rows=[],
            seed=seed,
        )

    def partition(self, name: str) -> str:
        if any(_matches(name, p) for p in self.random_prefixes):
            return "random"
        if any(_matches(name, p) for p in self.pretrained_prefixes):
            return "pretrained"
        raise InitPolicyError(f"parameter {name} matches neither the pretrained nor the random partition")

    def to_dict(self) -> dict:
        return asdict(self)


def _boundary_ids(model: CaptionModel) -> list[int]:
    return sorted({model.vocab.index[SOC], model.vocab.index[EOC]})


def _pretrained_value(
    name: str, model: CaptionModel, ckpt: dict[str, np.ndarray], policy: InitPolicy
) -> tuple[np.ndarray | None, list[int], str | None]:
    """Expected tensor for a pretrained name, the fresh rows, and any problem."""
    shape = model.state[name].shape
    if name not in ckpt:
        return None, [], "missing from checkpoint"
    src = np.array(ckpt[name], dtype=np.float32)  # copy: the model must not alias the checkpoint
    if name in policy.boundary_rows:
        rows = _boundary_ids(model)
        keep = [i for i in range(shape[0]) if i not in rows]
        if src.shape == shape:
            base = src.copy()
        elif src.shape == (len(keep),) + shape[1:]:
            base = np.zeros(shape, np.float32)
            base[keep] = src
        else:
            return None, rows, f"shape {src.shape} incompatible with {shape}"
        fresh = random_tensor(name, shape, policy.seed)
        base[rows] = fresh[rows]
        return base, rows, None
    if src.shape != shape:
        return None, [], f"shape {src.shape} != {shape}"
    return src, [], None


def apply_init_policy(model: CaptionModel, checkpoint: dict[str, np.ndarray] | None, policy: InitPolicy) -> dict:
    """Initialise ``model`` in place and return the provenance audit."""
    ckpt = checkpoint or {}
    problems = []
    plan: dict[str, np.ndarray] = {}
    for name, t in model.state.items():
        part = policy.partition(name)
        if part == "random":
            plan[name] = random_tensor(name, t.shape, policy.seed)
            continue
        value, _, problem = _pretrained_value(name, model, ckpt, policy)
        if problem:
            problems.append(f"{name}: {problem}")
        else:
            plan[name] = value
    if problems:
        raise InitPolicyError("cannot apply init policy:\n  " + "\n  ".join(problems))
    for name, value in plan.items():
        model.state[name].data = value
    return verify(model, ckpt, policy)


def verify(model: CaptionModel, checkpoint: dict[str, np.ndarray] | None, policy: InitPolicy,
           replay_random: bool = True) -> dict:
    """Classify every tensor as pretrained-match, random or mismatch.

    With ``replay_random`` the random partition is checked against the
    seeded draw; otherwise random tensors are reported without comparison
    (the right choice after training).
    """
    ckpt = checkpoint or {}
    entries = []
    for name, t in model.state.items():
        try:
            part = policy.partition(name)
        except InitPolicyError as exc:
            entries.append({"name": name, "partition": None, "status": "mismatch", "detail": str(exc)})
            continue
        entry = {"name": name, "partition": part, "shape": list(t.shape), "buffer": is_buffer(name)}
        if part == "random":
            ok = (not replay_random) or np.array_equal(t.data, random_tensor(name, t.shape, policy.seed))
            entry["status"] = "random" if ok else "mismatch"
            if not ok:
                entry["detail"] = "differs from the seeded draw"
        else:
            expected, rows, problem = _pretrained_value(name, model, ckpt, policy)
            if problem:
                entry["status"], entry["detail"] = "mismatch", problem
            elif np.array_equal(t.data, expected):
                entry["status"] = "pretrained-match"
            else:
                entry["status"], entry["detail"] = "mismatch", "differs from checkpoint"
            if rows:
                entry["random_rows"] = rows
        entries.append(entry)
    counts = {s: sum(e["status"] == s for e in entries) for s in ("pretrained-match", "random", "mismatch")}
    return {
        "policy": policy.to_dict(),
        "total": len(entries),
        "counts": counts,
        "mismatches": [e["name"] for e in entries if e["status"] == "mismatch"],
        "entries": entries,
    }
