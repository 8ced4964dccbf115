"""Two-LSTM residual decoder with a visual sentinel and a modification gate.

Per timestep, with e the sentence embedding of the existing caption:

    x1 = [e ; mean(features) ; w_prev]           attention LSTM -> h1
    c  = attend(features, h1)
    x2 = [reduce(mean(attribute embeddings)) ; h1 ; c]   language LSTM -> h2, m2
    g_s = sigmoid(x2 W_x + h2_prev W_h),  s = g_s * tanh(m2)
    g_r = sigmoid(e W_e + s W_m)
    o   = g_r * e + tanh(h2 W_r + b_r)
    p   = softmax(o W_p)

All weights are stored (in, out) and applied to row vectors.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import AttentionParams, BatchedFeatures, attend_batch
from .autodiff import ContractError, ShapeError, Tensor
from .corpus import MAX_LEN, N_ATTRIBUTES
from .dan import DanParams, encode_batch, named, uniform


@dataclass
class ModelConfig:
    vocab_size: int
    feat_dim: int
    d: int = 32
    hidden: int = 64
    emb: int = 32
    att: int = 32
    branch: str = "spatial"
    dtype: str = "float64"

    def __post_init__(self):
        if self.branch not in ("spatial", "region"):
            raise ValueError(f"branch must be 'spatial' or 'region', not {self.branch!r}")

    @property
    def x1_dim(self):
        return self.d + self.feat_dim + self.emb

    @property
    def x2_dim(self):
        return self.d + self.hidden + self.feat_dim

    def to_dict(self):
        return asdict(self)


@dataclass
class LstmParams:
    """Fused gates: [i, f, o, g] = [x ; h] @ W + b."""

    W: Tensor
    b: Tensor

    @classmethod
    def init(cls, rng, inp, hidden, dtype=np.float64):
        b = np.zeros(4 * hidden, dtype=dtype)
        b[hidden:2 * hidden] = 1.0
        return cls(W=uniform(rng, (inp + hidden, 4 * hidden), 1 / np.sqrt(inp + hidden), dtype),
                   b=Tensor(b, requires_grad=True))

    @property
    def hidden(self):
        return self.W.shape[1] // 4

    @property
    def input_size(self):
        return self.W.shape[0] - self.hidden


@dataclass
class SentinelParams:
    W_x: Tensor
    W_h: Tensor

    @classmethod
    def init(cls, rng, inp, hidden, dtype=np.float64):
        return cls(W_x=uniform(rng, (inp, hidden), 1 / np.sqrt(inp), dtype),
                   W_h=uniform(rng, (hidden, hidden), 1 / np.sqrt(hidden), dtype))


@dataclass
class HeadParams:
    """Attribute reducer (two tanh layers), modification gate, resize layer, output projection."""

    R1: Tensor
    r1: Tensor
    R2: Tensor
    r2: Tensor
    W_e: Tensor
    W_m: Tensor
    W_r: Tensor
    b_r: Tensor
    W_p: Tensor

    @classmethod
    def init(cls, rng, emb, d, hidden, vocab, dtype=np.float64):
        se, sd, sh = 1 / np.sqrt(emb), 1 / np.sqrt(d), 1 / np.sqrt(hidden)
        return cls(R1=uniform(rng, (emb, d), se, dtype), r1=uniform(rng, (d,), se, dtype),
                   R2=uniform(rng, (d, d), sd, dtype), r2=uniform(rng, (d,), sd, dtype),
                   W_e=uniform(rng, (d, d), sd, dtype), W_m=uniform(rng, (hidden, d), sh, dtype),
                   W_r=uniform(rng, (hidden, d), sh, dtype), b_r=uniform(rng, (d,), sh, dtype),
                   W_p=uniform(rng, (d, vocab), sd, dtype))


@dataclass
class ModelParams:
    config: ModelConfig
    embed: Tensor
    dan: DanParams
    att_lstm: LstmParams
    attention: AttentionParams
    lang_lstm: LstmParams
    sentinel: SentinelParams
    head: HeadParams

    @classmethod
    def init(cls, config, seed=0):
        rng = ad.make_rng(seed)
        dt = np.dtype(config.dtype)
        c = config
        return cls(
            config=c,
            embed=uniform(rng, (c.vocab_size, c.emb), 0.1, dt),
            dan=DanParams.init(rng, c.emb, c.d, dt),
            att_lstm=LstmParams.init(rng, c.x1_dim, c.hidden, dt),
            attention=AttentionParams.init(rng, c.feat_dim, c.hidden, c.att, dt),
            lang_lstm=LstmParams.init(rng, c.x2_dim, c.hidden, dt),
            sentinel=SentinelParams.init(rng, c.x2_dim, c.hidden, dt),
            head=HeadParams.init(rng, c.emb, c.d, c.hidden, c.vocab_size, dt),
        )

    def named_parameters(self):
        out = {"embed": self.embed}
        for prefix in ("dan", "att_lstm", "attention", "lang_lstm", "sentinel", "head"):
            out.update(named(getattr(self, prefix), prefix))
        return out

    def groups(self):
        """Parameter names bucketed by sub-network."""
        out = {}
        for name in self.named_parameters():
            out.setdefault(name.split(".")[0], []).append(name)
        return out


# ------------------------------------------------------------ equation ops

def lstm_step(params, x, h_prev, m_prev):
    """Standard LSTM cell on (B, i) or (i,) inputs; returns (h, m)."""
    x, h_prev, m_prev = ad.as_tensor(x), ad.as_tensor(h_prev), ad.as_tensor(m_prev)
    H = params.hidden
    if x.shape[-1] != params.input_size or h_prev.shape[-1] != H or m_prev.shape[-1] != H:
        raise ShapeError(f"lstm_step: got x {x.shape}, h {h_prev.shape}, m {m_prev.shape} "
                         f"for input {params.input_size}, hidden {H}")
    z = ad.concat([x, h_prev], axis=-1)
    squeeze = z.ndim == 1
    if squeeze:
        z = ad.reshape(z, (1, -1))
    z = z @ params.W + params.b
    i = ad.sigmoid(z[:, 0:H])
    f = ad.sigmoid(z[:, H:2 * H])
    o = ad.sigmoid(z[:, 2 * H:3 * H])
    g = ad.tanh(z[:, 3 * H:4 * H])
    mp = ad.reshape(m_prev, (1, -1)) if squeeze else m_prev
    m = f * mp + i * g
    h = o * ad.tanh(m)
    if squeeze:
        return ad.reshape(h, (-1,)), ad.reshape(m, (-1,))
    return h, m


def attention_lstm_input(e, feats_mean, w_prev):
    """x1 = [e ; v_gb ; w_prev]."""
    return ad.concat([e, feats_mean, w_prev], axis=-1)


def reduce_attributes(attr_embs, head):
    """Mean of the 5 attribute embeddings through two tanh layers.

    ``attr_embs`` is (5, emb) or (B, 5, emb).
    """
    attr_embs = ad.as_tensor(attr_embs)
    if attr_embs.shape[-2] != N_ATTRIBUTES:
        raise ContractError(f"expected exactly {N_ATTRIBUTES} attributes, got {attr_embs.shape[-2]}")
    if attr_embs.ndim == 2:
        avg = ad.reshape(ad.mean(attr_embs, axis=0), (1, -1))
    else:
        B = attr_embs.shape[0]
        pool = np.repeat(np.eye(B, dtype=attr_embs.data.dtype), N_ATTRIBUTES, axis=1) / N_ATTRIBUTES
        avg = Tensor(pool) @ ad.reshape(attr_embs, (B * N_ATTRIBUTES, -1))
    out = ad.tanh(ad.tanh(avg @ head.R1 + head.r1) @ head.R2 + head.r2)
    return ad.reshape(out, (-1,)) if attr_embs.ndim == 2 else out


def language_lstm_input(attr_embs, h1, c, head):
    """x2 = [A_avg ; h1 ; c]."""
    a = reduce_attributes(attr_embs, head)
    return ad.concat([a, h1, c], axis=-1)


def _rowmat(x):
    x = ad.as_tensor(x)
    return (ad.reshape(x, (1, -1)), True) if x.ndim == 1 else (x, False)


def sentinel(params, x2, h2_prev, m2):
    """g_s = sigmoid(x2 W_x + h2_prev W_h); s = g_s * tanh(m2). Returns (s, g_s)."""
    x2, sq = _rowmat(x2)
    h2_prev, _ = _rowmat(h2_prev)
    m2, _ = _rowmat(m2)
    g_s = ad.sigmoid(x2 @ params.W_x + h2_prev @ params.W_h)
    s = g_s * ad.tanh(m2)
    if sq:
        return ad.reshape(s, (-1,)), ad.reshape(g_s, (-1,))
    return s, g_s


def modification_gate(e, s, head):
    """g_r = sigmoid(e W_e + s W_m)."""
    e, sq = _rowmat(e)
    s, _ = _rowmat(s)
    g = ad.sigmoid(e @ head.W_e + s @ head.W_m)
    return ad.reshape(g, (-1,)) if sq else g


def output_logits(g_r, e, h2, head):
    """o = g_r * e + tanh(h2 W_r + b_r); logits = o W_p. Returns (o, logits)."""
    g_r, sq = _rowmat(g_r)
    e, _ = _rowmat(e)
    h2, _ = _rowmat(h2)
    o = g_r * e + ad.tanh(h2 @ head.W_r + head.b_r)
    logits = o @ head.W_p
    if sq:
        return ad.reshape(o, (-1,)), ad.reshape(logits, (-1,))
    return o, logits


def residual_output(g_r, e, h2, head):
    """Returns (o_t, p_c)."""
    o, logits = output_logits(g_r, e, h2, head)
    return o, ad.softmax(logits)


# ----------------------------------------------------------------- batching

@dataclass
class Batch:
    feats: np.ndarray
    feat_mask: np.ndarray
    existing: np.ndarray
    existing_len: np.ndarray
    attributes: np.ndarray
    inputs: np.ndarray = None
    targets: np.ndarray = None
    target_mask: np.ndarray = None
    ids: list = field(default_factory=list)

    @property
    def size(self):
        return self.feats.shape[0]


def example_features(ex, branch):
    feats = ex.image_features if branch == "spatial" else ex.region_features
    if feats is None:
        raise ShapeError(f"example {ex.id} has no {branch} features")
    return np.asarray(feats)


def make_batch(examples, vocab, branch="spatial", max_len=MAX_LEN, with_targets=True):
    """Pad a list of CaptionExamples into id arrays (targets follow gold[0])."""
    B = len(examples)
    fs = [example_features(ex, branch) for ex in examples]
    P = max(f.shape[0] for f in fs)
    D = fs[0].shape[1]
    feats = np.zeros((B, P, D))
    fmask = np.zeros((B, P), bool)
    for b, f in enumerate(fs):
        if f.shape[1] != D:
            raise ShapeError("feature widths differ within a batch")
        feats[b, :f.shape[0]] = f
        fmask[b, :f.shape[0]] = True
    special = {vocab.pad_id, vocab.start_id, vocab.end_id}
    ex_ids = [[i for i in vocab.encode(ex.existing) if i not in special][:max_len] for ex in examples]
    Le = max([len(x) for x in ex_ids] + [1])
    existing = np.zeros((B, Le), np.int64)
    for b, x in enumerate(ex_ids):
        existing[b, :len(x)] = x
    attrs = np.array([vocab.encode(ex.attributes) for ex in examples], np.int64)
    if attrs.shape != (B, N_ATTRIBUTES):
        raise ContractError(f"every example needs exactly {N_ATTRIBUTES} attributes")
    batch = Batch(feats=feats, feat_mask=fmask, existing=existing,
                  existing_len=np.array([len(x) for x in ex_ids]), attributes=attrs,
                  ids=[ex.id for ex in examples])
    if with_targets:
        golds = [vocab.encode(ex.gold[0])[:max_len - 1] + [vocab.end_id] for ex in examples]
        T = max(len(g) for g in golds)
        inputs = np.zeros((B, T), np.int64)
        targets = np.zeros((B, T), np.int64)
        tmask = np.zeros((B, T))
        for b, g in enumerate(golds):
            inputs[b, 0] = vocab.start_id
            inputs[b, 1:len(g)] = g[:-1]
            targets[b, :len(g)] = g
            tmask[b, :len(g)] = 1.0
        batch.inputs, batch.targets, batch.target_mask = inputs, targets, tmask
    return batch


# ------------------------------------------------------------ model wiring

class Context:
    """Per-sequence quantities that do not change across timesteps."""

    def __init__(self, e, features, attr):
        self.e = e
        self.features = features
        self.attr = attr

    @property
    def size(self):
        return self.e.shape[0]

    def take(self, rows, params):
        """Row-select a frozen copy (used to fan out beams)."""
        rows = np.asarray(rows)
        bf = self.features
        feats = bf.feats.data[rows]
        mask = bf.mask[rows]
        with ad.no_grad():
            new_bf = BatchedFeatures(feats, mask, params.attention)
        return Context(Tensor(self.e.data[rows]), new_bf, Tensor(self.attr.data[rows]))


@dataclass
class DecoderState:
    h1: Tensor
    m1: Tensor
    h2: Tensor
    m2: Tensor
    t: int = 0

    def take(self, rows):
        rows = np.asarray(rows)
        return DecoderState(*(Tensor(getattr(self, k).data[rows]) for k in ("h1", "m1", "h2", "m2")),
                            t=self.t)


def zero_state(params, batch_size):
    dt = params.embed.data.dtype
    H = params.config.hidden
    z = [Tensor(np.zeros((batch_size, H), dtype=dt)) for _ in range(4)]
    return DecoderState(*z, t=0)


def encode_context(params, batch):
    e = encode_batch(batch.existing, batch.existing_len, params.embed, params.dan)
    bf = BatchedFeatures(batch.feats, batch.feat_mask, params.attention)
    attr_embs = ad.embed(params.embed, batch.attributes)
    attr = reduce_attributes(attr_embs, params.head)
    return Context(e, bf, attr)


def step_logits(params, ctx, state, w_prev, masks=None):
    """One timestep. Returns (logits (B, V), new state, diagnostics)."""
    w = ad.embed(params.embed, np.asarray(w_prev, dtype=np.int64))
    x1 = attention_lstm_input(ctx.e, ctx.features.mean, w)
    if masks is not None:
        x1 = x1 * masks["x1"]
    h1, m1 = lstm_step(params.att_lstm, x1, state.h1, state.m1)
    c, alpha = attend_batch(ctx.features, h1, params.attention)
    x2 = ad.concat([ctx.attr, h1, c], axis=-1)
    if masks is not None:
        x2 = x2 * masks["x2"]
    h2, m2 = lstm_step(params.lang_lstm, x2, state.h2, state.m2)
    s, g_s = sentinel(params.sentinel, x2, state.h2, m2)
    g_r = modification_gate(ctx.e, s, params.head)
    h2_out = h2 * masks["h2"] if masks is not None else h2
    _, logits = output_logits(g_r, ctx.e, h2_out, params.head)
    diag = {"alpha": alpha.data, "g_r": g_r.data, "g_s": g_s.data,
            "g_r_mean": g_r.data.mean(axis=-1), "g_s_mean": g_s.data.mean(axis=-1)}
    return logits, DecoderState(h1, m1, h2, m2, t=state.t + 1), diag


def decode_step(params, ctx, state, w_prev, masks=None):
    """One full timestep: (p_c, new state, diagnostics)."""
    logits, new_state, diag = step_logits(params, ctx, state, w_prev, masks)
    return ad.softmax(logits), new_state, diag


def forward_teacher(params, batch, masks=None):
    """Teacher-forced pass. Returns (per-step logits list, per-step diagnostics)."""
    ctx = encode_context(params, batch)
    state = zero_state(params, batch.size)
    logits, diags = [], []
    for t in range(batch.inputs.shape[1]):
        lg, state, diag = step_logits(params, ctx, state, batch.inputs[:, t], masks)
        logits.append(lg)
        diags.append(diag)
    return logits, diags
