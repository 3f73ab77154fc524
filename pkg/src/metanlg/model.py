"""Semantically conditioned recurrent generator.

A single-layer LSTM decoder whose cell state receives an injection from a
dialogue-act vector that decays over time through a sigmoid reading gate:

    r_t = sigmoid(W_r [x_t; h_{t-1}] + b_r)
    d_t = r_t * d_{t-1}
    c_t = f * c_{t-1} + i * c_hat + tanh(d_t W_d)
    h_t = o * tanh(c_t)

The same cell arithmetic runs on two backends: tape nodes (training, so
losses are differentiable, twice if needed) and plain numpy (decoding and
evaluation, batched over beam entries).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .corpus import parse_placeholder, placeholder

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

SEGMENT_NAMES = ("emb", "lstm_w", "lstm_b", "read_w", "read_b", "da_w",
                 "out_w", "out_b")


class Vocabulary:
    """Token/id bijection with fixed reserved ids 0..3.

    Holds one token per (domain, slot) placeholder of the schema plus the
    ordinary word tokens seen in a corpus.
    """

    def __init__(self, tokens):
        extra = sorted(set(tokens) - set(RESERVED))
        self.tokens = RESERVED + tuple(extra)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def from_examples(cls, examples, schema):
        tokens = {placeholder(d, s) for d, s in schema.slot_pairs}
        for ex in examples:
            tokens.update(ex.delex_tokens)
        return cls(tokens)

    def __len__(self):
        return len(self.tokens)

    def id(self, token):
        return self.index.get(token, UNK)

    def encode(self, tokens):
        """BOS + token ids + EOS."""
        return [BOS] + [self.id(t) for t in tokens] + [EOS]

    def decode(self, ids):
        return tuple(self.tokens[i] for i in ids
                     if i not in (PAD, BOS, EOS))


def da_vector(da, schema):
    """Multi-hot conditioning vector: act-type block then (domain,slot) block.

    A slot position is set when the DA mentions it, valued or not.
    """
    acts = schema.acts
    pairs = schema.slot_pairs
    vec = np.zeros(len(acts) + len(pairs))
    act_pos = {a: i for i, a in enumerate(acts)}
    pair_pos = {p: len(acts) + i for i, p in enumerate(pairs)}
    for item in da.acts:
        vec[act_pos[item.act]] = 1.0
    for pair in da.mentioned_slots():
        vec[pair_pos[pair]] = 1.0
    if not vec[:len(acts)].any():
        raise ValueError("dialogue act vector has no act-type entry")
    return vec


@dataclass(frozen=True)
class GeneratorConfig:
    hidden: int = 100
    embedding: int = 50
    dropout: float = 0.25


def param_spec(n_vocab, da_dim, cfg):
    e, h = cfg.embedding, cfg.hidden
    return [
        ("emb", (n_vocab, e)),
        ("lstm_w", (e + h, 4 * h)),
        ("lstm_b", (4 * h,)),
        ("read_w", (e + h, da_dim)),
        ("read_b", (da_dim,)),
        ("da_w", (da_dim, cfg.hidden)),
        ("out_w", (h, n_vocab)),
        ("out_b", (n_vocab,)),
    ]


def init_params(n_vocab, da_dim, cfg, rng):
    """Seeded uniform(-0.08, 0.08) initialization."""
    spec = param_spec(n_vocab, da_dim, cfg)
    total = sum(int(np.prod(shape)) for _, shape in spec)
    return ad.ParameterVector.build(spec,
                                    init=rng.uniform(-0.08, 0.08, size=total))


@dataclass
class DecoderState:
    """Per-step carriers; arrays on the numpy backend, nodes on the tape."""

    h: object
    c: object
    da: object


class _NodeOps:
    """Cell arithmetic on tape nodes (1-D carriers or batched rows)."""

    mul = staticmethod(ad.mul)
    matmul = staticmethod(ad.matmul)
    sigmoid = staticmethod(ad.sigmoid)
    tanh = staticmethod(ad.tanh)

    @staticmethod
    def add(a, b):
        if a.value.ndim == 2 and b.value.ndim == 1:
            return ad.add_bias(a, b)
        return ad.add(a, b)

    @staticmethod
    def concat(a, b):
        return ad.concat([a, b])

    @staticmethod
    def part(x, k, width):
        return ad.slice_(x, k * width, (k + 1) * width)


class _ArrayOps:
    """Cell arithmetic on numpy arrays; carriers may have a batch dim."""

    add = staticmethod(np.add)
    mul = staticmethod(np.multiply)
    matmul = staticmethod(np.matmul)
    tanh = staticmethod(np.tanh)

    @staticmethod
    def sigmoid(x):
        return 1.0 / (1.0 + np.exp(-x))

    @staticmethod
    def concat(a, b):
        return np.concatenate([a, b], axis=-1)

    @staticmethod
    def part(x, k, width):
        return x[..., k * width:(k + 1) * width]


def _cell(ops, seg, x, state, hidden):
    """One recurrent step shared by both backends."""
    xh = ops.concat(x, state.h)
    pre = ops.add(ops.matmul(xh, seg["lstm_w"]), seg["lstm_b"])
    i = ops.sigmoid(ops.part(pre, 0, hidden))
    f = ops.sigmoid(ops.part(pre, 1, hidden))
    o = ops.sigmoid(ops.part(pre, 2, hidden))
    cand = ops.tanh(ops.part(pre, 3, hidden))
    r = ops.sigmoid(ops.add(ops.matmul(xh, seg["read_w"]), seg["read_b"]))
    da = ops.mul(r, state.da)
    c = ops.add(ops.add(ops.mul(f, state.c), ops.mul(i, cand)),
                ops.tanh(ops.matmul(da, seg["da_w"])))
    h = ops.mul(o, ops.tanh(c))
    return DecoderState(h=h, c=c, da=da)


def _segs(tp):
    return {name: tp.seg(name) for name in SEGMENT_NAMES}


def initial_state(da_vec, hidden, backend="array"):
    if backend == "array":
        return DecoderState(h=np.zeros(hidden), c=np.zeros(hidden),
                            da=np.asarray(da_vec, dtype=np.float64))
    return DecoderState(h=ad.constant(np.zeros(hidden)),
                        c=ad.constant(np.zeros(hidden)),
                        da=ad.constant(da_vec))


def step(tp, state, token_id, cfg, masks=None):
    """One taped decoder step; returns (next state, logits node).

    ``masks``, when given, is an (x_mask, h_mask) pair of pre-scaled dropout
    masks applied to the token embedding and the hidden-to-logits path.
    """
    seg = _segs(tp) if not isinstance(tp, dict) else tp
    x = ad.embedding(seg["emb"], token_id)
    if masks is not None:
        x = ad.dropout(x, masks[0])
    state = _cell(_NodeOps, seg, x, state, cfg.hidden)
    h_out = ad.dropout(state.h, masks[1]) if masks is not None else state.h
    logits = ad.add(ad.matmul(h_out, seg["out_w"]), seg["out_b"])
    return state, logits


def sequence_nll(tp, da_vec, token_ids, cfg, masks=None):
    """Teacher-forced negative log-likelihood of one id sequence (node).

    ``token_ids`` must include BOS and EOS; ``masks`` is an optional list of
    per-step (x_mask, h_mask) pairs.
    """
    if len(token_ids) < 2:
        raise ValueError("sequence must contain BOS plus at least one token")
    seg = _segs(tp)
    state = initial_state(da_vec, cfg.hidden, backend="node")
    total = None
    for t in range(1, len(token_ids)):
        step_masks = masks[t - 1] if masks is not None else None
        state, logits = step(seg, state, token_ids[t - 1], cfg,
                             masks=step_masks)
        logp = ad.log_softmax(logits)
        picked = ad.slice_(logp, token_ids[t], token_ids[t] + 1)
        total = picked if total is None else ad.add(total, picked)
    return ad.negate(ad.reshape(total, ()))


def sequence_nll_batch(tp, da_rows, id_seqs, cfg, mask_rng=None):
    """Mean teacher-forced NLL over a batch of sequences, as one tape node.

    Sequences are padded to a common length; padded positions are masked
    out of the loss, so the result equals the mean of the per-sequence
    values (up to float summation order). ``mask_rng``, when given, samples
    fresh per-step dropout masks for the whole batch.
    """
    if not id_seqs:
        raise ValueError("batch is empty")
    n = len(id_seqs)
    max_len = max(len(ids) for ids in id_seqs)
    if max_len < 2:
        raise ValueError("sequences must contain BOS plus at least one token")
    ids = np.full((n, max_len), PAD, dtype=np.int64)
    for b, seq in enumerate(id_seqs):
        ids[b, :len(seq)] = seq
    lengths = np.array([len(seq) for seq in id_seqs])

    seg = _segs(tp)
    hidden = cfg.hidden
    state = DecoderState(h=ad.constant(np.zeros((n, hidden))),
                         c=ad.constant(np.zeros((n, hidden))),
                         da=ad.constant(np.asarray(da_rows)))
    keep = 1.0 - cfg.dropout
    total = None
    for t in range(max_len - 1):
        x = ad.embedding_rows(seg["emb"], ids[:, t])
        if mask_rng is not None and cfg.dropout > 0:
            x = ad.dropout(x, (mask_rng.random((n, cfg.embedding)) < keep)
                           / keep)
        state = _cell(_NodeOps, seg, x, state, hidden)
        h_out = state.h
        if mask_rng is not None and cfg.dropout > 0:
            h_out = ad.dropout(h_out, (mask_rng.random((n, hidden)) < keep)
                               / keep)
        logits = ad.add_bias(ad.matmul(h_out, seg["out_w"]), seg["out_b"])
        logp = ad.log_softmax(logits)
        picked = ad.pick_last(logp, ids[:, t + 1])
        live = (lengths > t + 1).astype(np.float64)
        step_sum = ad.sum_(ad.mul(picked, ad.constant(live)))
        total = step_sum if total is None else ad.add(total, step_sum)
    return ad.scale(ad.negate(total), 1.0 / n)


def sequence_nll_value(params, da_vec, token_ids, cfg):
    """Fast numpy NLL of one sequence (no tape, no dropout)."""
    seg = {name: params.seg(name) for name in SEGMENT_NAMES}
    state = initial_state(da_vec, cfg.hidden)
    total = 0.0
    for t in range(1, len(token_ids)):
        x = seg["emb"][token_ids[t - 1]]
        state = _cell(_ArrayOps, seg, x, state, cfg.hidden)
        logits = state.h @ seg["out_w"] + seg["out_b"]
        shifted = logits - logits.max()
        total += shifted[token_ids[t]] - np.log(np.exp(shifted).sum())
    return float(-total)


def sample_masks(rng, n_steps, cfg):
    """Per-step inverted-dropout masks for one teacher-forced sequence."""
    rate = cfg.dropout
    if rate <= 0.0:
        return None
    keep = 1.0 - rate
    masks = []
    for _ in range(n_steps):
        x_mask = (rng.random(cfg.embedding) < keep) / keep
        h_mask = (rng.random(cfg.hidden) < keep) / keep
        masks.append((x_mask, h_mask))
    return masks


# ---------------------------------------------------------------------------
# decoding

_NEG = -1e30  # pseudo-logit for banned continuations


def decode(params, da_vec, cfg, beam_width=5, max_len=40):
    """Length-normalized beam search; dropout off, ties break on token ids.

    Returns up to ``beam_width`` (token_ids, score) pairs sorted by score
    (mean log-probability per emitted token, EOS included), best first.
    The returned ids exclude BOS and EOS.
    """
    if beam_width < 1 or max_len < 1:
        raise ValueError("beam_width and max_len must be >= 1")
    seg = {name: params.seg(name) for name in SEGMENT_NAMES}
    n_vocab = seg["out_b"].shape[0]
    hidden = cfg.hidden
    da_vec = np.asarray(da_vec, dtype=np.float64)

    # beams: token tuples plus stacked (B, .) carriers
    seqs = [()]
    logps = np.zeros(1)
    state = DecoderState(h=np.zeros((1, hidden)), c=np.zeros((1, hidden)),
                         da=da_vec[None, :].copy())
    prev = np.array([BOS])
    finished = []  # (score, seq)

    for _ in range(max_len):
        x = seg["emb"][prev]
        state = _cell(_ArrayOps, seg, x, state, hidden)
        logits = state.h @ seg["out_w"] + seg["out_b"]
        logits[:, PAD] = _NEG
        logits[:, BOS] = _NEG
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        cand = logps[:, None] + logp  # (B, V)

        entries = []
        for b in range(len(seqs)):
            n_emitted = len(seqs[b]) + 1
            for v in range(n_vocab):
                if cand[b, v] <= _NEG / 2:
                    continue
                entries.append((cand[b, v] / n_emitted, seqs[b] + (v,),
                                b, v, cand[b, v]))
        entries.sort(key=lambda e: (-e[0], e[1]))

        # the step keeps beam_width hypotheses; EOS ones retire into
        # ``finished`` and consume their slot (so width 1 is plain greedy)
        next_seqs, next_logps, rows, toks = [], [], [], []
        for score, seq, b, v, total in entries[:beam_width]:
            if v == EOS:
                finished.append((score, seq[:-1]))
            else:
                next_seqs.append(seq)
                next_logps.append(total)
                rows.append(b)
                toks.append(v)
        if not next_seqs:
            break
        seqs = next_seqs
        logps = np.array(next_logps)
        rows = np.array(rows)
        state = DecoderState(h=state.h[rows], c=state.c[rows],
                             da=state.da[rows])
        prev = np.array(toks)

    for b in range(len(seqs)):
        if seqs[b]:
            finished.append((logps[b] / len(seqs[b]), seqs[b]))
    finished.sort(key=lambda e: (-e[0], e[1]))
    return [(seq, score) for score, seq in finished[:beam_width]]
