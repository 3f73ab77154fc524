"""Generator checks against explicit-loop oracles and enumeration."""

import itertools
import math

import numpy as np
import pytest

from metanlg import autodiff as ad
from metanlg import model
from metanlg.model import (BOS, EOS, PAD, UNK, DecoderState, GeneratorConfig,
                           Vocabulary, decode, init_params, param_spec,
                           sequence_nll, sequence_nll_value, step)
from helpers import fd_gradient, rel_errors


def tiny(n_vocab=5, da_dim=3, emb=3, hidden=4, seed=0):
    cfg = GeneratorConfig(hidden=hidden, embedding=emb, dropout=0.0)
    rng = np.random.default_rng(seed)
    pv = init_params(n_vocab, da_dim, cfg, rng)
    return pv, cfg


# ---------------------------------------------------------------------------
# loop oracle: the same equations written with explicit scalar loops


def oracle_step(pv, cfg, h, c, d, token):
    emb = pv.seg("emb")
    lstm_w, lstm_b = pv.seg("lstm_w"), pv.seg("lstm_b")
    read_w, read_b = pv.seg("read_w"), pv.seg("read_b")
    da_w = pv.seg("da_w")
    out_w, out_b = pv.seg("out_w"), pv.seg("out_b")
    H = cfg.hidden

    x = [float(emb[token, j]) for j in range(cfg.embedding)]
    xh = x + [float(v) for v in h]

    def sig(z):
        return 1.0 / (1.0 + math.exp(-z))

    pre = []
    for j in range(4 * H):
        acc = float(lstm_b[j])
        for k, xv in enumerate(xh):
            acc += xv * float(lstm_w[k, j])
        pre.append(acc)
    i = [sig(pre[j]) for j in range(H)]
    f = [sig(pre[H + j]) for j in range(H)]
    o = [sig(pre[2 * H + j]) for j in range(H)]
    cand = [math.tanh(pre[3 * H + j]) for j in range(H)]

    r = []
    for j in range(len(d)):
        acc = float(read_b[j])
        for k, xv in enumerate(xh):
            acc += xv * float(read_w[k, j])
        r.append(sig(acc))
    d2 = [r[j] * float(d[j]) for j in range(len(d))]

    c2 = []
    for j in range(H):
        inj = 0.0
        for k in range(len(d)):
            inj += d2[k] * float(da_w[k, j])
        c2.append(f[j] * float(c[j]) + i[j] * cand[j] + math.tanh(inj))
    h2 = [o[j] * math.tanh(c2[j]) for j in range(H)]

    logits = []
    for v in range(out_b.shape[0]):
        acc = float(out_b[v])
        for j in range(H):
            acc += h2[j] * float(out_w[j, v])
        logits.append(acc)
    return h2, c2, d2, logits


def oracle_nll(pv, cfg, da_vec, ids):
    h = [0.0] * cfg.hidden
    c = [0.0] * cfg.hidden
    d = list(map(float, da_vec))
    total = 0.0
    for t in range(1, len(ids)):
        h, c, d, logits = oracle_step(pv, cfg, h, c, d, ids[t - 1])
        m = max(logits)
        z = sum(math.exp(v - m) for v in logits)
        total += (logits[ids[t]] - m) - math.log(z)
    return -total


# ---------------------------------------------------------------------------
# step


def test_step_matches_loop_oracle():
    rng = np.random.default_rng(17)
    for trial in range(5):
        pv, cfg = tiny(seed=trial)
        da = rng.integers(0, 2, size=3).astype(float)
        da[0] = 1.0
        tp = ad.TapedParams(pv)
        state = model.initial_state(da, cfg.hidden, backend="node")
        token = int(rng.integers(5))
        state, logits = step(tp, state, token, cfg)
        oh, oc, od, ologits = oracle_step(pv, cfg, [0.0] * 4, [0.0] * 4,
                                          da, token)
        np.testing.assert_allclose(logits.value, ologits, rtol=1e-12)
        np.testing.assert_allclose(state.h.value, oh, rtol=1e-12)
        np.testing.assert_allclose(state.c.value, oc, rtol=1e-12)
        np.testing.assert_allclose(state.da.value, od, rtol=1e-12)


def test_saturated_reading_gate_zeroes_the_da():
    pv, cfg = tiny()
    pv.seg("read_b")[:] = -40.0
    tp = ad.TapedParams(pv)
    da = np.array([1.0, 1.0, 0.0])
    state = model.initial_state(da, cfg.hidden, backend="node")
    state, _ = step(tp, state, 4, cfg)
    assert np.abs(state.da.value).max() <= 1e-15


def test_zero_da_vector_removes_the_injection_term():
    pv, cfg = tiny(seed=3)
    altered = pv.copy()
    altered.seg("da_w")[:] = 0.0
    da = np.zeros(3)
    outs = []
    for params in (pv, altered):
        tp = ad.TapedParams(params)
        state = model.initial_state(da, cfg.hidden, backend="node")
        _, logits = step(tp, state, 2, cfg)
        outs.append(logits.value)
    np.testing.assert_array_equal(outs[0], outs[1])


def test_da_decay_is_monotone_non_increasing():
    pv, cfg = tiny(seed=9)
    da = np.array([1.0, 0.0, 1.0])
    tp = ad.TapedParams(pv)
    state = model.initial_state(da, cfg.hidden, backend="node")
    prev = state.da.value
    for token in (1, 4, 2, 3, 0):
        state, _ = step(tp, state, token, cfg)
        cur = state.da.value
        assert np.all(cur <= prev + 1e-15)
        assert np.all(cur >= 0.0)
        prev = cur


# ---------------------------------------------------------------------------
# sequence NLL


def test_singleton_vocabulary_has_zero_nll():
    cfg = GeneratorConfig(hidden=4, embedding=3, dropout=0.0)
    rng = np.random.default_rng(0)
    pv = init_params(1, 2, cfg, rng)
    tp = ad.TapedParams(pv)
    nll = sequence_nll(tp, np.array([1.0, 0.0]), [0, 0, 0, 0], cfg)
    assert float(nll.value) == pytest.approx(0.0, abs=1e-12)


def test_uniform_logits_give_length_times_log_vocab():
    pv, cfg = tiny(n_vocab=10, seed=4)
    pv.seg("out_w")[:] = 0.0
    pv.seg("out_b")[:] = 0.0
    tp = ad.TapedParams(pv)
    ids = [BOS, 4, 5, 6, 7, 8, 9, EOS]  # seven predictions
    nll = sequence_nll(tp, np.array([1.0, 0.0, 1.0]), ids, cfg)
    assert float(nll.value) == pytest.approx(7 * math.log(10), rel=1e-12)


def test_sequence_nll_matches_loop_oracle():
    rng = np.random.default_rng(23)
    for trial in range(5):
        pv, cfg = tiny(seed=100 + trial)
        da = np.array([1.0, rng.integers(0, 2), rng.integers(0, 2)],
                      dtype=float)
        ids = [BOS] + list(rng.integers(0, 5, size=6)) + [EOS]
        tp = ad.TapedParams(pv)
        nll = sequence_nll(tp, da, ids, cfg)
        assert float(nll.value) == pytest.approx(
            oracle_nll(pv, cfg, da, ids), rel=1e-12)


def test_fast_nll_path_matches_taped_path():
    rng = np.random.default_rng(29)
    for trial in range(5):
        pv, cfg = tiny(seed=200 + trial)
        da = np.array([1.0, 1.0, 0.0])
        ids = [BOS] + list(rng.integers(0, 5, size=5)) + [EOS]
        tp = ad.TapedParams(pv)
        taped = float(sequence_nll(tp, da, ids, cfg).value)
        fast = sequence_nll_value(pv, da, ids, cfg)
        assert fast == pytest.approx(taped, rel=1e-13)


def test_nll_gradient_matches_finite_differences():
    pv, cfg = tiny(seed=5)
    da = np.array([1.0, 0.0, 1.0])
    ids = [BOS, 4, 3, 2]
    tp = ad.TapedParams(pv)
    g = ad.grad(sequence_nll(tp, da, ids, cfg), tp)

    def f(vals):
        return sequence_nll_value(pv.with_data(vals), da, ids, cfg)

    ref = fd_gradient(f, pv.data)
    assert rel_errors(g.data, ref).max() <= 1e-4


def test_all_ones_masks_are_bit_identical_to_no_dropout():
    pv, cfg = tiny(seed=6)
    da = np.array([1.0, 1.0, 1.0])
    ids = [BOS, 2, 3, 4, EOS]
    ones = [(np.ones(cfg.embedding), np.ones(cfg.hidden))
            for _ in range(len(ids) - 1)]
    tp = ad.TapedParams(pv)
    a = float(sequence_nll(tp, da, ids, cfg, masks=ones).value)
    b = float(sequence_nll(ad.TapedParams(pv), da, ids, cfg).value)
    assert a == b


def test_dropout_masks_change_the_loss_and_stay_deterministic():
    pv, _ = tiny(seed=8)
    cfg = GeneratorConfig(hidden=4, embedding=3, dropout=0.5)
    da = np.array([1.0, 0.0, 0.0])
    ids = [BOS, 2, 3, EOS]
    masks = model.sample_masks(np.random.default_rng(1), len(ids) - 1, cfg)
    masks_again = model.sample_masks(np.random.default_rng(1),
                                     len(ids) - 1, cfg)
    a = float(sequence_nll(ad.TapedParams(pv), da, ids, cfg,
                           masks=masks).value)
    b = float(sequence_nll(ad.TapedParams(pv), da, ids, cfg,
                           masks=masks_again).value)
    plain = float(sequence_nll(ad.TapedParams(pv), da, ids, cfg).value)
    assert a == b
    assert a != plain


# ---------------------------------------------------------------------------
# decoding


def oracle_logp_table(pv, cfg, da_vec):
    """log P(next token | prefix) for every prefix, via the loop oracle."""
    def logp(prefix):
        h = [0.0] * cfg.hidden
        c = [0.0] * cfg.hidden
        d = list(map(float, da_vec))
        tokens = [BOS] + list(prefix)
        for t in tokens:
            h, c, d, logits = oracle_step(pv, cfg, h, c, d, t)
        logits[PAD] = -1e30
        logits[BOS] = -1e30
        m = max(logits)
        z = sum(math.exp(v - m) for v in logits)
        return [v - m - math.log(z) for v in logits]
    return logp


def enumerate_sequences(pv, cfg, da_vec, max_len, n_vocab):
    """Every complete decoder output with its normalized score."""
    logp = oracle_logp_table(pv, cfg, da_vec)
    results = []
    tokens = [v for v in range(n_vocab) if v not in (PAD, BOS)]

    def walk(prefix, total):
        table = logp(prefix)
        for v in tokens:
            seq = prefix + (v,)
            score = total + table[v]
            if v == EOS:
                results.append((score / len(seq), prefix))
            elif len(seq) == max_len:
                results.append((score / len(seq), seq))
            else:
                walk(seq, score)

    walk((), 0.0)
    results.sort(key=lambda e: (-e[0], e[1]))
    return results


def test_full_width_beam_equals_exhaustive_enumeration():
    # five vocab ids, three of them generatable (EOS, UNK, one word)
    for trial in range(20):
        pv, cfg = tiny(n_vocab=5, seed=300 + trial)
        da = np.array([1.0, 1.0, 0.0])
        beams = decode(pv, da, cfg, beam_width=9, max_len=2)
        oracle = enumerate_sequences(pv, cfg, da, max_len=2, n_vocab=5)
        assert len(beams) == len(oracle) == 7
        for (seq, score), (oscore, oseq) in zip(beams, oracle):
            assert seq == oseq
            assert score == pytest.approx(oscore, rel=1e-10)


def test_beam_width_one_is_greedy():
    for trial in range(20):
        pv, cfg = tiny(n_vocab=6, seed=400 + trial)
        da = np.array([1.0, 0.0, 1.0])
        [(seq, _)] = decode(pv, da, cfg, beam_width=1, max_len=6)

        logp = oracle_logp_table(pv, cfg, da)
        greedy = []
        for _ in range(6):
            table = logp(tuple(greedy))
            best = max(range(len(table)), key=lambda v: (table[v], -v))
            if best == EOS:
                break
            greedy.append(best)
        assert seq == tuple(greedy)


def test_dominant_token_repeats_until_max_len():
    pv, cfg = tiny(n_vocab=6, seed=1)
    pv.seg("out_w")[:] = 0.0
    pv.seg("out_b")[:] = 0.0
    pv.seg("out_b")[5] = 50.0
    beams = decode(pv, np.ones(3), cfg, beam_width=3, max_len=4)
    assert beams[0][0] == (5, 5, 5, 5)


def test_beam_scores_are_sorted_non_increasing():
    pv, cfg = tiny(n_vocab=7, seed=2)
    beams = decode(pv, np.array([1.0, 1.0, 1.0]), cfg, beam_width=5,
                   max_len=5)
    scores = [s for _, s in beams]
    assert scores == sorted(scores, reverse=True)


def test_decode_precondition_errors():
    pv, cfg = tiny()
    with pytest.raises(ValueError):
        decode(pv, np.ones(3), cfg, beam_width=0, max_len=2)
    with pytest.raises(ValueError):
        decode(pv, np.ones(3), cfg, beam_width=1, max_len=0)


# ---------------------------------------------------------------------------
# vocabulary


def test_vocabulary_reserved_ids_and_roundtrip():
    vocab = Vocabulary(["meal", "area", "[slot-bistro-food]"])
    assert vocab.tokens[:4] == ("<pad>", "<bos>", "<eos>", "<unk>")
    assert vocab.id("<pad>") == PAD and vocab.id("<unk>") == UNK
    ids = vocab.encode(("meal", "[slot-bistro-food]"))
    assert ids[0] == BOS and ids[-1] == EOS
    assert vocab.decode(ids) == ("meal", "[slot-bistro-food]")
    assert vocab.id("never-seen") == UNK


def test_vocabulary_is_deterministic_and_bijective():
    v1 = Vocabulary(["b", "a", "c"])
    v2 = Vocabulary(["c", "a", "b", "a"])
    assert v1.tokens == v2.tokens
    assert len(set(v1.index.values())) == len(v1)
