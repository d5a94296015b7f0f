"""Acceptance suite: one group of tests per criterion.

Each test carries a ``criterion`` marker; conftest prints one PASS/FAIL line
per criterion at the end of the run.
"""
from __future__ import annotations

import itertools
import json
import math
import time
from unittest import mock

import numpy as np
import pytest

from capforge import checkpoint as ck
from capforge import cli
from capforge import decoder as dec
from capforge import encoder as enc
from capforge import tensor as tf
from capforge.config import ModelConfig
from capforge.dsp import AudioClip, FeatureFormatError, LogMelSpectrogram, dump_features, log_mel, parse_features
from capforge.experiments import synthesize, toy_vocabulary
from capforge.gradcheck import check_gradients
from capforge.infer import beam_search, greedy_decode, sequence_score
from capforge.metrics import bleu, cider, evaluate, make_corpus, meteor_lite, rouge_l, spider
from capforge.model import CaptionModel
from capforge.tensor import BatchNormStats, Tensor
from capforge.trainer import TrainConfig, Trainer, lr_schedule, make_examples
from capforge.tokenizer import decode

from conftest import make_model

# ---------------------------------------------------------------------------
# 1. Gradient suite
# ---------------------------------------------------------------------------

C1 = pytest.mark.criterion(1, "gradient suite: every op plus an encoder block and a decoder block")
_GRAD_SECONDS: list[float] = []


def _g(seed, *shape, shift=0.0):
    return np.random.default_rng(seed).standard_normal(shape) + shift


def _away_from_zero(seed, *shape):
    x = _g(seed, *shape)
    return np.where(np.abs(x) < 0.1, np.sign(x + 1e-12) * 0.1 + x, x)


def _dropout_fn(t):
    return tf.dropout(t["x"], 0.3, training=True, rng=np.random.default_rng(7))


def _bn_train(t):
    stats = BatchNormStats.fresh(3, dtype=np.float64)
    return tf.batch_norm(t["x"], stats, t["gamma"], t["beta"], training=True)


def _bn_eval(t):
    stats = BatchNormStats(Tensor(np.array([0.1, -0.2, 0.3])), Tensor(np.array([0.5, 2.0, 1.5])))
    return tf.batch_norm(t["x"], stats, t["gamma"], t["beta"], training=False)


OP_CASES = {
    "add": (lambda t: t["a"] + t["b"], {"a": _g(1, 3, 4), "b": _g(2, 4)}),
    "sub": (lambda t: t["a"] - t["b"], {"a": _g(3, 3, 4), "b": _g(4, 3, 1)}),
    "mul": (lambda t: t["a"] * t["b"], {"a": _g(5, 2, 3), "b": _g(6, 2, 3)}),
    "div": (lambda t: t["a"] / t["b"], {"a": _g(7, 2, 3), "b": _g(8, 2, 3, shift=3.0)}),
    "neg": (lambda t: -t["a"], {"a": _g(9, 5)}),
    "pow": (lambda t: t["a"] ** 3, {"a": _g(10, 5)}),
    "getitem": (lambda t: t["a"][1:, ::2], {"a": _g(11, 3, 4)}),
    "exp": (lambda t: t["a"].exp(), {"a": _g(12, 4)}),
    "log": (lambda t: t["a"].log(), {"a": np.abs(_g(13, 4)) + 0.5}),
    "tanh": (lambda t: t["a"].tanh(), {"a": _g(14, 4)}),
    "sqrt": (lambda t: t["a"].sqrt(), {"a": np.abs(_g(15, 4)) + 0.5}),
    "sum": (lambda t: t["a"].sum(axis=1), {"a": _g(16, 3, 4)}),
    "mean": (lambda t: t["a"].mean(axis=0, keepdims=True), {"a": _g(17, 3, 4)}),
    "reshape": (lambda t: t["a"].reshape(4, 3) * _g(18, 4, 3), {"a": _g(19, 3, 4)}),
    "transpose": (lambda t: t["a"].transpose(2, 0, 1), {"a": _g(20, 2, 3, 4)}),
    "swapaxes": (lambda t: t["a"].swapaxes(0, 2), {"a": _g(21, 2, 3, 4)}),
    "matmul": (lambda t: tf.matmul(t["a"], t["b"]), {"a": _g(22, 2, 3, 4), "b": _g(23, 4, 5)}),
    "linear": (lambda t: tf.linear(t["x"], t["w"], t["b"]), {"x": _g(24, 3, 4), "w": _g(25, 4, 2), "b": _g(26, 2)}),
    "concat": (lambda t: tf.concat([t["a"], t["b"]], axis=1), {"a": _g(27, 2, 3), "b": _g(28, 2, 1)}),
    "pad_stack": (lambda t: tf.pad_stack([t["a"], t["b"]]), {"a": _g(29, 3, 2), "b": _g(30, 1, 2)}),
    "embedding": (lambda t: tf.embedding(t["w"], np.array([[0, 2], [2, 3]])), {"w": _g(31, 5, 3)}),
    "softmax": (lambda t: tf.softmax(t["a"]), {"a": _g(32, 3, 5)}),
    "log_softmax": (lambda t: tf.log_softmax(t["a"], axis=0), {"a": _g(33, 3, 5)}),
    "relu": (lambda t: tf.relu(t["a"]), {"a": _away_from_zero(34, 4, 5)}),
    "gelu": (lambda t: tf.gelu(t["a"]), {"a": _g(35, 4, 5) * 2}),
    "layer_norm": (lambda t: tf.layer_norm(t["x"], t["gamma"], t["beta"]),
                   {"x": _g(36, 3, 6), "gamma": _g(37, 6, shift=1.0), "beta": _g(38, 6)}),
    "batch_norm_train": (_bn_train, {"x": _g(39, 2, 3, 4, 5), "gamma": _g(40, 3, shift=1.0), "beta": _g(41, 3)}),
    "batch_norm_eval": (_bn_eval, {"x": _g(42, 3, 4, 5), "gamma": _g(43, 3, shift=1.0), "beta": _g(44, 3)}),
    "dropout": (_dropout_fn, {"x": _g(45, 6, 6)}),
    "conv2d": (lambda t: tf.conv2d(t["x"], t["k"]), {"x": _g(46, 2, 2, 5, 4), "k": _g(47, 3, 2, 3, 3)}),
    "avg_pool2d": (lambda t: tf.avg_pool2d(t["x"]), {"x": _g(48, 2, 5, 7)}),
    "cross_entropy": (lambda t: tf.cross_entropy(t["logits"], np.array([[1, 0, 3], [2, 2, 0]]),
                                                 np.array([[1, 1, 0], [1, 0, 1]], bool)),
                      {"logits": _g(49, 2, 3, 4)}),
}


def _timed_check(fn, inputs, **kw):
    start = time.process_time()
    res = check_gradients(fn, inputs, **kw)
    _GRAD_SECONDS.append(time.process_time() - start)
    return res


@C1
@pytest.mark.parametrize("op", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(op):
    fn, inputs = OP_CASES[op]
    res = _timed_check(fn, inputs)
    assert res.passed(), f"{op}: max {res.max_error:.2e}, below 1e-4: {res.fraction_below(1e-4):.3f}"


@C1
def test_encoder_block_gradients():
    """First CNN10 block (1 -> 64 channels, two conv/BN/ReLU layers and pooling), training-mode BN."""
    cfg = ModelConfig.from_preset("tiny", 27).encoder
    shapes = {n: s for n, s in enc.encoder_shapes(cfg).items() if n.startswith("encoder.block0.")}
    gen = np.random.default_rng(0)
    inputs = {"x": gen.standard_normal((1, 12, 8))}
    for name, shape in shapes.items():
        if name.endswith(("running_mean", "running_var")):
            continue
        if name.endswith("gamma"):
            inputs[name] = 1.0 + 0.1 * gen.standard_normal(shape)
        elif name.endswith("beta"):
            inputs[name] = 0.1 * gen.standard_normal(shape)
        else:
            inputs[name] = gen.standard_normal(shape) * np.sqrt(2.0 / np.prod(shape[1:]))

    def fn(t):
        state = {k: v for k, v in t.items() if k != "x"}
        for layer in (1, 2):
            pre = f"encoder.block0.bn{layer}"
            state[f"{pre}.running_mean"] = Tensor(np.zeros(64), dtype=np.float64)
            state[f"{pre}.running_var"] = Tensor(np.ones(64), dtype=np.float64)
        return enc.conv_block(t["x"], state, 0, training=True)

    def relu_pattern(t):
        seen = []
        real_relu = tf.relu

        def recording(x):
            seen.append(x.data > 0)
            return real_relu(x)

        with mock.patch.object(tf, "relu", recording):
            fn(t)
        return np.concatenate([m.reshape(-1) for m in seen])

    res = _timed_check(fn, inputs, max_coords=48, kink_signature=relu_pattern)
    print(f"encoder block: {res.checked} coordinates scored, {res.skipped_total} straddled a ReLU kink")
    assert res.skipped_total <= 0.1 * (res.checked + res.skipped_total)
    assert res.passed(), f"max {res.max_error:.2e}, below 1e-4: {res.fraction_below(1e-4):.3f}"


@C1
def test_decoder_block_gradients():
    """Self-attention, cross-attention and feed-forward sub-layers of one block, with dropout."""
    d, heads, ffn = 8, 2, 32
    shapes = {**dec.attention_shapes("b.selfattn", d), **dec.attention_shapes("b.crossattn", d),
              "b.ffn.w1": (d, ffn), "b.ffn.b1": (ffn,), "b.ffn.w2": (ffn, d), "b.ffn.b2": (d,),
              "b.ffn.ln.gamma": (d,), "b.ffn.ln.beta": (d,)}
    gen = np.random.default_rng(1)
    inputs = {"h": gen.standard_normal((2, 4, d)), "mem": gen.standard_normal((2, 3, d))}
    for name, shape in shapes.items():
        scale = 1.0 if name.endswith("gamma") else 0.0
        inputs[name] = scale + gen.standard_normal(shape) * (0.1 if len(shape) == 1 else 1 / np.sqrt(shape[0]))
    key_mask = np.array([[1, 1, 1, 0], [1, 1, 1, 1]], bool)
    memory_mask = np.array([[1, 1, 0], [1, 1, 1]], bool)

    def fn(t):
        rng = np.random.default_rng(3)
        x = dec.causal_self_attention(t["h"], t, "b.selfattn", heads, key_mask=key_mask,
                                      training=True, rng=rng, dropout=0.1)
        x = dec.cross_attention(x, t["mem"], t, "b.crossattn", heads, memory_mask=memory_mask,
                                training=True, rng=rng, dropout=0.1)
        return dec.feed_forward(x, t, "b.ffn", training=True, rng=rng, dropout=0.1)

    res = _timed_check(fn, inputs, max_coords=32)
    assert res.passed(), f"max {res.max_error:.2e}, below 1e-4: {res.fraction_below(1e-4):.3f}"


@C1
def test_gradient_suite_runtime():
    assert len(_GRAD_SECONDS) == len(OP_CASES) + 2, "run the whole gradient suite to time it"
    assert sum(_GRAD_SECONDS) < 120.0


# ---------------------------------------------------------------------------
# 2. Causality
# ---------------------------------------------------------------------------

C2 = pytest.mark.criterion(2, "causality over 100 random tiny models")


def _random_case(case: int):
    gen = np.random.default_rng(10_000 + case)
    vocab = toy_vocabulary()
    cfg = ModelConfig.from_preset("tiny", len(vocab), hidden=16, num_heads=int(gen.choice([1, 2, 4])),
                                  num_blocks=int(gen.integers(1, 3)))
    model = CaptionModel(cfg, vocab)
    ck.random_init(model, seed=case)
    for name, t in model.state.items():  # sharpen weights so attention is far from uniform
        if name.startswith("decoder.") and t.ndim == 2:
            t.data = (t.data * 25.0).astype(np.float32)
    n = int(gen.integers(2, 9))
    ids = gen.integers(0, len(vocab), size=n)
    feats = Tensor(gen.standard_normal((int(gen.integers(1, 5)), 16)).astype(np.float32))
    return model, ids, feats, gen


@C2
@pytest.mark.parametrize("block", range(10))
def test_perturbing_later_tokens_leaves_earlier_logits(block):
    for case in range(block * 10, block * 10 + 10):
        model, ids, feats, gen = _random_case(case)
        j = int(gen.integers(1, len(ids)))
        base = model.decode(ids, feats).data
        changed = ids.copy()
        changed[j] = (ids[j] + 1 + gen.integers(0, model.vocab_size - 1)) % model.vocab_size
        after = model.decode(changed, feats).data
        np.testing.assert_allclose(after[:j], base[:j], atol=1e-6, rtol=0)
        assert np.abs(after[j] - base[j]).max() > 1e-6  # the perturbation is real


@C2
@pytest.mark.parametrize("block", range(10))
def test_position_gradients_vanish_for_future_positions(block):
    for case in range(block * 10, block * 10 + 10):
        model, ids, feats, gen = _random_case(case)
        i = int(gen.integers(0, len(ids) - 1))
        model.zero_grad()
        logits = model.decode(ids, feats)
        proj = gen.standard_normal(logits.shape[-1]).astype(np.float32)
        (logits[i] * Tensor(proj)).sum().backward()
        grad = model.state["decoder.embed.positions"].grad
        assert np.abs(grad[i + 1:]).max() <= 1e-6
        assert np.abs(grad[i]).max() > 0


# ---------------------------------------------------------------------------
# 3. Cross-attention wiring
# ---------------------------------------------------------------------------

C3 = pytest.mark.criterion(3, "cross-attention wiring unit cases")


def _identity_attention(prefix: str, d: int) -> dict[str, Tensor]:
    state = {}
    for name, shape in dec.attention_shapes(prefix, d).items():
        if name.endswith(("wq", "wk", "wv", "wo")):
            state[name] = Tensor(np.eye(d))
        elif name.endswith("gamma"):
            state[name] = Tensor(np.ones(d))
        else:
            state[name] = Tensor(np.zeros(d))
    return state


@C3
def test_single_key_gives_unit_weight_and_memory_plus_residual(rng):
    d = 6
    state = _identity_attention("x", d)
    h = Tensor(rng.standard_normal((4, d)))
    mem = Tensor(rng.standard_normal((1, d)))
    pre_norm = dec.multi_head_attention(h, mem, state, "x", num_heads=2).data + h.data
    np.testing.assert_allclose(pre_norm, mem.data + h.data, atol=1e-6)
    out = dec.cross_attention(h, mem, state, "x", num_heads=2).data
    expected = tf.layer_norm(Tensor(mem.data + h.data), state["x.ln.gamma"], state["x.ln.beta"], dec.LN_EPS).data
    np.testing.assert_allclose(out, expected, atol=1e-6)


@C3
def test_zero_memory_passes_residual_through(rng):
    d = 6
    state = _identity_attention("x", d)
    h = Tensor(rng.standard_normal((3, d)))
    attn = dec.multi_head_attention(h, Tensor(np.zeros((5, d))), state, "x", num_heads=3)
    np.testing.assert_allclose(attn.data + h.data, h.data, atol=1e-7)


@C3
@pytest.mark.parametrize("heads", [1, 2, 4])
def test_multi_head_matches_per_head_loop(heads):
    gen = np.random.default_rng(heads)
    d, n, t = 8, 5, 7
    state = {name: Tensor(gen.standard_normal(shape), dtype=np.float64)
             for name, shape in dec.attention_shapes("x", d).items()}
    h, mem = gen.standard_normal((n, d)), gen.standard_normal((t, d))
    got = dec.multi_head_attention(Tensor(h, dtype=np.float64), Tensor(mem, dtype=np.float64),
                                   state, "x", heads).data

    s = {k: v.data for k, v in state.items()}
    q, k, v = h @ s["x.wq"] + s["x.bq"], mem @ s["x.wk"] + s["x.bk"], mem @ s["x.wv"] + s["x.bv"]
    dh = d // heads
    concat = np.zeros((n, d))
    for head in range(heads):
        cols = slice(head * dh, (head + 1) * dh)
        for i in range(n):
            scores = np.array([q[i, cols] @ k[j, cols] / math.sqrt(dh) for j in range(t)])
            w = np.exp(scores - scores.max())
            w /= w.sum()
            concat[i, cols] = sum(w[j] * v[j, cols] for j in range(t))
    expected = concat @ s["x.wo"] + s["x.bo"]
    np.testing.assert_allclose(got, expected, atol=1e-5)


@C3
def test_decoder_output_depends_on_encoder_features(tiny_model, rng):
    ids = np.array([tiny_model.soc_id, 5, 6])
    feats = rng.standard_normal((3, 128)).astype(np.float32)
    a = tiny_model.decode(ids, Tensor(feats)).data
    b = tiny_model.decode(ids, Tensor(feats + 1.0)).data
    assert np.abs(a - b).max() > 1e-4


# ---------------------------------------------------------------------------
# 4. Init-policy audit
# ---------------------------------------------------------------------------

C4 = pytest.mark.criterion(4, "init-policy audit on a toy checkpoint")


def _toy_checkpoint(model: CaptionModel) -> dict[str, np.ndarray]:
    """BERT-shaped checkpoint: no cross-attention and no <soc>/<eoc> rows."""
    gen = np.random.default_rng(99)
    v = model.vocab_size
    out = {}
    for name, t in model.state.items():
        if ".crossattn." in name:
            continue
        shape = t.shape
        if name in ("decoder.embed.tokens", "decoder.head.bias"):
            shape = (v - 2,) + shape[1:]
        out[name] = gen.standard_normal(shape).astype(np.float32)
    return out


@C4
def test_default_policy_audit(vocab):
    cfg = ModelConfig.from_preset("tiny", len(vocab))
    model = CaptionModel(cfg, vocab)
    ckpt = _toy_checkpoint(model)
    policy = ck.InitPolicy.pretrained_decoder(seed=5)
    audit = ck.apply_init_policy(model, ckpt, policy)
    report = ck.verify(model, ckpt, policy)
    assert report["counts"]["mismatch"] == 0
    assert audit["counts"] == report["counts"]
    by_name = {e["name"]: e for e in report["entries"]}
    for name, entry in by_name.items():
        if ".crossattn." in name:
            assert entry["partition"] == "random" and entry["status"] == "random", name
        else:
            assert entry["partition"] == "pretrained" and entry["status"] == "pretrained-match", name
    crossattn = [n for n in by_name if ".crossattn." in n]
    assert len(crossattn) == cfg.num_blocks * 10
    # retained rows are the checkpoint's rows, boundary rows are fresh
    tokens = model.state["decoder.embed.tokens"].data
    np.testing.assert_array_equal(tokens[: len(vocab) - 2], ckpt["decoder.embed.tokens"])


@C4
def test_audit_names_a_perturbed_tensor(vocab):
    model = CaptionModel(ModelConfig.from_preset("tiny", len(vocab)), vocab)
    ckpt = _toy_checkpoint(model)
    policy = ck.InitPolicy.pretrained_decoder(seed=5)
    ck.apply_init_policy(model, ckpt, policy)
    model.state["decoder.block1.ffn.w2"].data[0, 0] += 1.0
    report = ck.verify(model, ckpt, policy)
    assert report["counts"]["mismatch"] == 1
    assert report["mismatches"] == ["decoder.block1.ffn.w2"]


# ---------------------------------------------------------------------------
# 5. Overfit
# ---------------------------------------------------------------------------

C5 = pytest.mark.criterion(5, "tiny model overfits 8 synthetic items")


@C5
@pytest.mark.slow
def test_tiny_model_overfits_eight_items():
    start = time.process_time()
    vocab = toy_vocabulary()
    items = synthesize(8, seed=7, min_seconds=2.0, max_seconds=4.0)
    examples = make_examples([(it.key, log_mel(AudioClip(it.samples)), [it.caption]) for it in items], vocab)
    model = CaptionModel(ModelConfig.from_preset("tiny", len(vocab)), vocab)
    ck.apply_init_policy(model, None, ck.InitPolicy.all_random(seed=0))
    cfg = TrainConfig(batch_size=4, epochs=300, warmup_epochs=5, decay_factor=1.0, seed=0,
                      freeze_encoder=True, calibrate_bn=True, spec_augment=False)
    trainer = Trainer(model, cfg)
    trainer.prepare(examples)
    reached = None
    for epoch in range(1, cfg.epochs + 1):
        loss = trainer.train_epoch(examples, epoch)
        if loss < 0.1:
            decoded = [decode(greedy_decode(model, trainer.encoded_features(ex.spec, ex.key)), vocab)
                       for ex in examples]
            if decoded == [ex.caption for ex in examples]:
                reached = epoch
                break
    elapsed = time.process_time() - start
    print(f"overfit reached at epoch {reached}, loss {loss:.4f}, {elapsed:.1f}s CPU")
    assert reached is not None and reached <= 300
    assert elapsed < 600.0


# ---------------------------------------------------------------------------
# 6. Decode equivalence
# ---------------------------------------------------------------------------

C6 = pytest.mark.criterion(6, "beam width 1 equals greedy; beam 2 escapes the trap")


@C6
@pytest.mark.parametrize("case", range(20))
def test_beam_one_equals_greedy(case):
    model = make_model(seed=case)
    gen = np.random.default_rng(case)
    for name in ("decoder.embed.tokens", "decoder.head.bias"):  # peaked, varied next-token distributions
        t = model.state[name]
        t.data = (t.data * 40.0 + (gen.standard_normal(t.shape) if t.ndim == 1 else 0)).astype(np.float32)
    feats = gen.standard_normal((int(gen.integers(1, 6)), 128)).astype(np.float32)
    greedy = greedy_decode(model, feats)
    beam = beam_search(model, feats, width=1)
    assert list(beam[0].ids) == greedy
    assert beam[0].score == pytest.approx(sequence_score(model, feats, greedy), abs=1e-5)


class TrapModel:
    """soc=0, eoc=1, a=2, b=3. 'a' leads the first step but ends in a weak continuation."""

    soc_id, eoc_id = 0, 1
    TABLE = {
        (0,): [0.0, 0.0, 0.55, 0.45],
        (0, 2): [0.0, 0.4, 0.3, 0.3],
        (0, 3): [0.0, 0.9, 0.05, 0.05],
    }

    def start(self, features):
        return ()

    def step(self, state, token):
        prefix = state + (token,)
        probs = self.TABLE.get(prefix, [0.0, 1.0, 0.0, 0.0])
        with np.errstate(divide="ignore"):
            return np.log(np.array(probs)), prefix


def _enumerate(model, max_len):
    best = None
    for length in range(1, max_len + 1):
        for body in itertools.product(range(4), repeat=length):
            if model.eoc_id in body[:-1]:
                continue
            if body[-1] != model.eoc_id and length < max_len:
                continue
            ids = (model.soc_id,) + body
            score = sequence_score(model, None, ids)
            if best is None or score > best[0]:
                best = (score, ids)
    return best


@C6
def test_beam_two_beats_greedy_on_trap():
    model = TrapModel()
    greedy = greedy_decode(model, None, max_len=3)
    best_score, best_ids = _enumerate(model, 3)
    top = beam_search(model, None, width=2, max_len=3)[0]
    assert tuple(greedy) == (0, 2, 1)
    assert top.ids == best_ids == (0, 3, 1)
    assert top.score == pytest.approx(best_score) == pytest.approx(math.log(0.45 * 0.9))
    assert top.score > sequence_score(model, None, greedy)


# ---------------------------------------------------------------------------
# 7. Metric oracles
# ---------------------------------------------------------------------------

C7 = pytest.mark.criterion(7, "metric oracle values")


@C7
def test_bleu1_brevity_case():
    assert bleu(make_corpus([("the cat", ["the cat sat"])]), 1) == pytest.approx(math.exp(-0.5), abs=1e-4)
    assert bleu(make_corpus([("the cat", ["the cat sat"])]), 1) == pytest.approx(0.6065, abs=1e-4)


@C7
def test_rouge_l_hand_case():
    r, p, beta = 2 / 5, 2 / 3, 1.2
    expected = (1 + beta**2) * r * p / (r + beta**2 * p)
    got = rouge_l(make_corpus([("the cat sat", ["the cat on the mat"])]))
    assert got == pytest.approx(expected, abs=1e-9)
    assert got == pytest.approx(0.478, abs=5e-4)


@C7
def test_single_item_cider_is_zero():
    assert cider(make_corpus([("a dog barks", ["a dog barks"])])) == 0.0


@C7
@pytest.mark.parametrize("n", [1, 2, 3, 5, 8])
def test_meteor_identical_pair(n):
    sentence = " ".join(f"w{i}" for i in range(n))
    assert meteor_lite(make_corpus([(sentence, [sentence])])) == pytest.approx(1 - 0.5 / n**3)


@C7
def test_spider_table_row():
    assert spider(66.7, 17.2) == pytest.approx(41.95)
    assert round(spider(66.7, 17.2), 1) in (41.9, 42.0)
    report = evaluate(make_corpus([("a b", ["a b"]), ("c d", ["c d"])]), spice=0.2)
    assert report["scores"]["spider"] == pytest.approx((report["scores"]["cider"] + 0.2) / 2)


# ---------------------------------------------------------------------------
# 8. Schedule trace
# ---------------------------------------------------------------------------

C8 = pytest.mark.criterion(8, "learning-rate trace")


@C8
def test_lr_trace_is_exact():
    cfg = TrainConfig(base_lr=5e-4, epochs=40)
    expected = [1e-4, 2e-4, 3e-4, 4e-4, 5e-4] + [5e-4] * 10 + [5e-5] * 10 + [5e-6] * 10 + [5e-7] * 5
    assert [lr_schedule(e, cfg) for e in range(1, 41)] == expected


# ---------------------------------------------------------------------------
# 9. Determinism
# ---------------------------------------------------------------------------

C9 = pytest.mark.criterion(9, "identical seeds give byte-identical checkpoints")


@C9
def test_two_training_runs_are_byte_identical(tmp_path):
    manifest = tmp_path / "data" / "manifest.jsonl"
    assert cli.main(["generate", "--n", "3", "--seed", "4", "--out", str(manifest.parent),
                     "--min-seconds", "2", "--max-seconds", "2.5"]) == 0
    blobs = []
    for run in ("a", "b"):
        out = tmp_path / run
        code = cli.main(["train", "--manifest", str(manifest), "--val-manifest", str(manifest),
                         "--out", str(out), "--epochs", "3", "--warmup-epochs", "1", "--batch-size", "2",
                         "--seed", "11"])
        assert code == 0
        blobs.append((out / "best.acpt").read_bytes())
        assert (out / "train_log.jsonl").exists()
    assert blobs[0] == blobs[1]
    logs = [(tmp_path / r / "train_log.jsonl").read_text() for r in ("a", "b")]
    assert logs[0] == logs[1]


# ---------------------------------------------------------------------------
# 10. Format round-trips
# ---------------------------------------------------------------------------

C10 = pytest.mark.criterion(10, "ACPT1 and MELS1 round-trips and corruption rejection")


@C10
def test_acpt_round_trip_is_bit_exact(tiny_model):
    blob = ck.save_model(tiny_model, {"note": "x"})
    model, meta = ck.load_model(blob)
    for name, t in tiny_model.state.items():
        assert model.state[name].data.tobytes() == t.data.tobytes()
    assert meta["note"] == "x"
    assert ck.save_model(model, {"note": "x"}) == blob


@C10
def test_acpt_corruptions_rejected():
    blob = ck.save({"w": np.arange(6, dtype=np.float32).reshape(2, 3)})
    with pytest.raises(ck.CheckpointError, match="magic"):
        ck.load(b"XXXX" + blob[4:])
    with pytest.raises(ck.CheckpointError):
        ck.load(blob[:-4])
    with pytest.raises(ck.CheckpointError):
        ck.load(blob + b"\0\0\0\0")
    with pytest.raises(ck.CheckpointError):
        ck.load(blob[:10])


@C10
def test_acpt_shape_with_short_payload():
    manifest = {"format_version": 1, "entries": [{"name": "w", "dtype": "f32", "shape": [2, 3], "offset": 0}],
                "metadata": {}}
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    blob = ck.MAGIC + len(header).to_bytes(8, "little") + header + np.zeros(5, "<f4").tobytes()
    with pytest.raises(ck.CheckpointError, match="length|truncat|bytes"):
        ck.load(blob)


@C10
def test_mels_round_trip_is_bit_exact(rng):
    spec = LogMelSpectrogram(rng.standard_normal((37, 64)).astype(np.float32))
    blob = dump_features(spec)
    back = parse_features(blob)
    assert back.frames.tobytes() == spec.frames.tobytes()
    assert dump_features(back) == blob


@C10
def test_mels_corruptions_rejected(rng):
    blob = dump_features(LogMelSpectrogram(rng.standard_normal((5, 64)).astype(np.float32)))
    with pytest.raises(FeatureFormatError, match="magic"):
        parse_features(b"MELS2" + blob[5:])
    with pytest.raises(FeatureFormatError):
        parse_features(blob[:-1])
    with pytest.raises(FeatureFormatError):
        parse_features(blob[:12])
    bad_bins = bytearray(blob)
    bad_bins[12:16] = (40).to_bytes(4, "little")
    with pytest.raises(FeatureFormatError, match="mel"):
        parse_features(bytes(bad_bins))
