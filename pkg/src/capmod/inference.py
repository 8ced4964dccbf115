"""Greedy and beam-search decoding, and the end-to-end modify pipeline."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .corpus import MAX_LEN
from .decoder import encode_context, make_batch, step_logits, zero_state


@dataclass
class Decoded:
    """A decoded caption. ``tokens`` excludes <end>; ``trace`` has one entry per token."""

    tokens: list
    logprob: float
    finished: bool
    trace: list = field(default_factory=list)
    finish_step: int = 0

    def words(self, vocab):
        return [vocab.decode_id(i) for i in self.tokens]


@dataclass
class BeamHypothesis:
    tokens: list
    logprob: float
    state_row: int
    finished: bool = False
    finish_step: int = 0
    trace: list = field(default_factory=list)


def banned_ids(vocab):
    return [vocab.pad_id, vocab.start_id, vocab.unk_id]


def _trace_entry(diag, row, token):
    return {"token": int(token), "g_r": float(diag["g_r_mean"][row]),
            "g_s": float(diag["g_s_mean"][row]), "alpha": diag["alpha"][row].tolist()}


def _log_probs(logits, banned):
    lp = ad.log_softmax(logits).data.copy()
    lp[:, banned] = -np.inf
    return lp


def prepare(params, examples, vocab):
    batch = make_batch(examples, vocab, params.config.branch, with_targets=False)
    with ad.no_grad():
        return encode_context(params, batch)


def greedy_decode_batch(params, examples, vocab, max_len=MAX_LEN, min_len=1):
    """Argmax decoding of several examples in lockstep.

    <end> is not allowed before ``min_len`` words have been emitted.
    """
    banned = banned_ids(vocab)
    with ad.no_grad():
        ctx = prepare(params, examples, vocab)
        B = ctx.size
        state = zero_state(params, B)
        prev = np.full(B, vocab.start_id)
        out = [Decoded([], 0.0, False) for _ in range(B)]
        alive = np.ones(B, bool)
        for t in range(max_len):
            logits, state, diag = step_logits(params, ctx, state, prev)
            lp = _log_probs(logits, banned if t >= min_len else banned + [vocab.end_id])
            choice = lp.argmax(axis=1)
            for b in np.flatnonzero(alive):
                tok = int(choice[b])
                out[b].logprob += float(lp[b, tok])
                if tok == vocab.end_id:
                    out[b].finished = True
                    out[b].finish_step = t
                    alive[b] = False
                else:
                    out[b].tokens.append(tok)
                    out[b].trace.append(_trace_entry(diag, b, tok))
            prev = choice
            if not alive.any():
                break
        for b in np.flatnonzero(alive):
            out[b].finish_step = max_len - 1
    return out


def greedy_decode(params, example, vocab, max_len=MAX_LEN, min_len=1):
    return greedy_decode_batch(params, [example], vocab, max_len, min_len)[0]


def _rank_key(h, length_normalize):
    score = h.logprob / max(len(h.tokens) + int(h.finished), 1) if length_normalize else h.logprob
    return (-score, h.finish_step, h.tokens)


def beam_decode(params, example, vocab, k=3, max_len=MAX_LEN, length_normalize=False, min_len=1):
    """Beam search; returns (best Decoded, all completed hypotheses best-first).

    Each step keeps the top ``k - len(finished)`` extensions by cumulative
    log-prob (ties: lexicographic token ids); those ending in <end> are set
    aside. Hypotheses still open at ``max_len`` count as truncated. As in
    greedy decoding, <end> is unavailable before ``min_len`` words.
    """
    if k < 1:
        raise ValueError("beam size must be >= 1")
    banned = banned_ids(vocab)
    finished = []
    with ad.no_grad():
        ctx0 = prepare(params, [example], vocab)
        alive = [BeamHypothesis([], 0.0, 0)]
        state = zero_state(params, 1)
        ctx = ctx0
        for t in range(max_len):
            prev = np.array([h.tokens[-1] if h.tokens else vocab.start_id for h in alive])
            logits, new_state, diag = step_logits(params, ctx, state, prev)
            lp = _log_probs(logits, banned if t >= min_len else banned + [vocab.end_id])
            cands = []
            for i, h in enumerate(alive):
                for v in np.flatnonzero(np.isfinite(lp[i])):
                    cands.append((-(h.logprob + lp[i, v]), h.tokens + [int(v)], i, int(v)))
            cands.sort(key=lambda c: (c[0], c[1]))
            width = k - len(finished)
            nxt = []
            for negscore, _seq, i, v in cands[:width]:
                negscore = float(negscore)
                h = alive[i]
                if v == vocab.end_id:
                    finished.append(BeamHypothesis(list(h.tokens), -negscore, i, True, t, h.trace))
                else:
                    nxt.append(BeamHypothesis(h.tokens + [v], -negscore, i, False, t,
                                              h.trace + [_trace_entry(diag, i, v)]))
            if not nxt or len(finished) >= k:
                alive = []
                break
            rows = [h.state_row for h in nxt]
            state = new_state.take(rows)
            ctx = ctx0.take([0] * len(nxt), params)
            for j, h in enumerate(nxt):
                h.state_row = j
            alive = nxt
        for h in alive:
            h.finish_step = max_len - 1
            finished.append(h)
    ranked = sorted(finished, key=lambda h: _rank_key(h, length_normalize))
    results = [Decoded(h.tokens, h.logprob, h.finished, h.trace, h.finish_step) for h in ranked]
    return results[0], results


@dataclass
class Modification:
    example_id: str
    existing: list
    modified: list
    logprob: float
    trace: list

    def record(self):
        return {"example_id": self.example_id, "existing": " ".join(self.existing),
                "modified": " ".join(self.modified), "logprob": self.logprob,
                "gates": [round(e["g_r"], 6) for e in self.trace]}


def modify(params, example, vocab, k=3, max_len=MAX_LEN):
    """Encode the existing caption, beam-decode, and return the caption with its gate trace."""
    best, _ = beam_decode(params, example, vocab, k=k, max_len=max_len)
    words = best.words(vocab)
    trace = [dict(e, t=t, word=w) for t, (e, w) in enumerate(zip(best.trace, words))]
    return Modification(example.id, list(example.existing), words, best.logprob, trace)


TRACE_FIELDS = ("example_id", "t", "token", "g_r_mean", "g_s_mean", "alpha")


def trace_rows(mod):
    for e in mod.trace:
        yield {"example_id": mod.example_id, "t": e["t"], "token": e["word"],
               "g_r_mean": f"{e['g_r']:.6f}", "g_s_mean": f"{e['g_s']:.6f}",
               "alpha": " ".join(f"{a:.6f}" for a in e["alpha"])}


def trace_csv(mods):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=TRACE_FIELDS, lineterminator="\n")
    writer.writeheader()
    for m in mods:
        writer.writerows(trace_rows(m))
    return buf.getvalue()
