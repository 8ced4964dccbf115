"""Training loop: Adam with step annealing, variational dropout, CIDEr early stopping."""

from __future__ import annotations

import json
import logging
import os
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, NumericalError, Tensor
from .corpus import MAX_LEN, Vocabulary, build_vocab
from .decoder import ModelConfig, ModelParams, forward_teacher, make_batch
from .metrics import bleu, cider
from .objective import LossConfig, total_loss

log = logging.getLogger(__name__)

CKPT_MAGIC = b"LAMC"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


class TrainingDiverged(NumericalError):
    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrainConfig:
    lr0: float = 5e-4
    anneal_factor: float = 0.8
    anneal_every: int = 3
    batch_size: int = 16
    max_epochs: int = 40
    patience: int | None = 6
    dropout: float = 0.0
    clip_norm: float = 5.0
    seed: int = 0
    min_count: int = 5
    max_len: int = MAX_LEN
    val_beam: int = 3
    beta: float = 0.4
    occurrence_threshold: float = 4.0
    attribute_term: bool = False
    d: int = 32
    hidden: int = 64
    emb: int = 32
    att: int = 32
    branch: str = "spatial"
    dtype: str = "float64"

    def __post_init__(self):
        if not 0 < self.anneal_factor <= 1:
            raise ValueError("anneal_factor must be in (0, 1]")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1 (or None to disable)")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout rate must be in [0, 1)")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be >= 1 and max_epochs >= 0")

    @property
    def loss(self):
        return LossConfig(self.beta, self.occurrence_threshold, self.attribute_term)

    def model_config(self, vocab_size, feat_dim):
        return ModelConfig(vocab_size=vocab_size, feat_dim=feat_dim, d=self.d, hidden=self.hidden,
                           emb=self.emb, att=self.att, branch=self.branch, dtype=self.dtype)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


def lr_schedule(epoch, cfg=None):
    """lr0 * factor ** floor(epoch / every), ``epoch`` counting completed epochs from 0."""
    cfg = cfg or TrainConfig()
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * cfg.anneal_factor ** (epoch // cfg.anneal_every)


# ------------------------------------------------------------------ dropout

class DropoutMask:
    """Inverted-dropout mask drawn once and reused for a whole sequence."""

    def __init__(self, shape, rate, rng, dtype=np.float64):
        if not 0 <= rate < 1:
            raise ValueError("dropout rate must be in [0, 1)")
        self.rate = rate
        if rate == 0:
            self.mask = np.ones(shape, dtype=dtype)
        else:
            keep = rng.random(shape) >= rate
            self.mask = keep.astype(dtype) / (1.0 - rate)

    def __call__(self, x):
        return ad.mul(x, self.mask) if isinstance(x, Tensor) else x * self.mask


def variational_dropout(activations, rate, rng, training=True):
    """Apply one mask, sampled once, to every timestep of ``activations``."""
    if not 0 <= rate < 1:
        raise ValueError("dropout rate must be in [0, 1)")
    if not training or rate == 0:
        return list(activations)
    first = activations[0]
    shape = first.shape
    mask = DropoutMask(shape, rate, rng, getattr(first, "dtype", None) or first.data.dtype)
    return [mask(a) for a in activations]


def sample_masks(cfg_model, batch_size, rate, rng):
    dt = np.dtype(cfg_model.dtype)
    return {
        "x1": DropoutMask((batch_size, cfg_model.x1_dim), rate, rng, dt).mask,
        "x2": DropoutMask((batch_size, cfg_model.x2_dim), rate, rng, dt).mask,
        "h2": DropoutMask((batch_size, cfg_model.hidden), rate, rng, dt).mask,
    }


# -------------------------------------------------------------- checkpoints

def _write_records(fh, records):
    fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(records)))
    for name, arr in records:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)) + raw)
        fh.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes())


def _read_records(buf):
    def need(off, n, what):
        if off + n > len(buf):
            raise CheckpointError(f"truncated checkpoint: {what} at byte offset {off}")

    need(0, 12, "header")
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {CKPT_VERSION})")
    off = 12
    out = {}
    for _ in range(count):
        need(off, 4, "name length")
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        need(off, nlen, "name")
        name = bytes(buf[off:off + nlen]).decode("utf-8")
        off += nlen
        need(off, 4, "ndims")
        (ndims,) = struct.unpack_from("<I", buf, off)
        off += 4
        need(off, 8 * ndims, "dims")
        dims = struct.unpack_from(f"<{ndims}Q", buf, off)
        off += 8 * ndims
        nbytes = 8 * int(np.prod(dims, dtype=np.int64))
        need(off, nbytes, f"payload of {name}")
        out[name] = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=off).reshape(dims).copy()
        off += nbytes
    if off != len(buf):
        raise CheckpointError(f"trailing bytes after byte offset {off}")
    return out


def save_checkpoint(path, params, vocab, meta=None, adam=None):
    """Binary tensor records at ``path`` plus a JSON sidecar ``path + '.json'``."""
    path = Path(path)
    records = [(name, t.data) for name, t in params.named_parameters().items()]
    if adam is not None and adam.m:
        records += [(f"adam.m/{k}", v) for k, v in adam.m.items()]
        records += [(f"adam.v/{k}", v) for k, v in adam.v.items()]
    side = {"format_version": CKPT_VERSION, "model_config": params.config.to_dict(),
            "vocab": vocab.to_dict(), "vocab_hash": vocab.digest()}
    if adam is not None:
        side["adam"] = {"t": adam.t, "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
                        "eps": adam.eps}
    side.update(meta or {})
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        _write_records(fh, records)
    os.replace(tmp, path)
    side_path = Path(str(path) + ".json")
    side_path.write_text(json.dumps(side, indent=1, sort_keys=True), encoding="utf-8")
    return path


def load_checkpoint(path, expected_config=None, expected_vocab_hash=None):
    """Returns (ModelParams, Vocabulary, sidecar dict, AdamState or None).

    Nothing is built until every record has been read and validated.
    """
    path = Path(path)
    try:
        side = json.loads(Path(str(path) + ".json").read_text(encoding="utf-8"))
        buf = path.read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if side.get("format_version") != CKPT_VERSION:
        raise CheckpointError(f"checkpoint format {side.get('format_version')} != {CKPT_VERSION}")
    vocab = Vocabulary.from_dict(side["vocab"])
    if vocab.digest() != side.get("vocab_hash"):
        raise CheckpointError("vocabulary hash in sidecar does not match its vocabulary")
    if expected_vocab_hash is not None and expected_vocab_hash != side["vocab_hash"]:
        raise CheckpointError("checkpoint vocabulary differs from the expected one")
    cfg = ModelConfig(**side["model_config"])
    if expected_config is not None and expected_config != cfg:
        raise CheckpointError(f"checkpoint config {cfg} does not match {expected_config}")
    records = _read_records(buf)
    params = ModelParams.init(cfg, seed=0)
    named = params.named_parameters()
    for name, t in named.items():
        if name not in records:
            raise CheckpointError(f"checkpoint lacks tensor {name}")
        if records[name].shape != t.shape:
            raise CheckpointError(f"{name}: stored shape {records[name].shape} != {t.shape}")
    for name, t in named.items():
        t.data = records[name].astype(np.dtype(cfg.dtype))
    adam = None
    if "adam" in side:
        a = side["adam"]
        adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], t=a["t"])
        for name in named:
            if f"adam.m/{name}" in records:
                adam.m[name] = records[f"adam.m/{name}"].astype(np.dtype(cfg.dtype))
                adam.v[name] = records[f"adam.v/{name}"].astype(np.dtype(cfg.dtype))
    return params, vocab, side, adam


# --------------------------------------------------------------------- loop

def rng_state_to_json(state):
    def conv(v):
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        if isinstance(v, np.ndarray):
            return {"__array__": v.tolist(), "dtype": str(v.dtype)}
        return v
    return conv(state)


def rng_state_from_json(state):
    def conv(v):
        if isinstance(v, dict):
            if "__array__" in v:
                return np.array(v["__array__"], dtype=v["dtype"])
            return {k: conv(x) for k, x in v.items()}
        return v
    return conv(state)


@dataclass
class TrainResult:
    params: ModelParams
    vocab: Vocabulary
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_cider: float = float("-inf")
    stopped_early: bool = False


def corpus_vocab(examples, min_count):
    caps = []
    for ex in examples:
        caps.append(ex.existing)
        caps.extend(ex.gold)
        caps.append(ex.attributes)
    return build_vocab(caps, min_count=min_count)


def _feat_dim(examples, branch):
    ex = examples[0]
    feats = ex.image_features if branch == "spatial" else ex.region_features
    if feats is None:
        raise ValueError(f"training data has no {branch} features")
    return int(np.asarray(feats).shape[1])


def validate(params, examples, vocab, beam, max_len):
    from .inference import beam_decode, greedy_decode_batch

    if beam == 1:
        dec = greedy_decode_batch(params, examples, vocab, max_len)
    else:
        dec = [beam_decode(params, ex, vocab, k=beam, max_len=max_len)[0] for ex in examples]
    cands = [d.words(vocab) for d in dec]
    refs = [ex.gold for ex in examples]
    return cider(cands, refs), bleu(cands, refs)[3]


def _param_norms(params):
    return {k: float(np.linalg.norm(v.data)) for k, v in params.named_parameters().items()}


def train(train_set, val_set, cfg, out_dir=None, vocab=None, resume=None, log_fn=None):
    """Run the full recipe. Returns a TrainResult holding the best-CIDEr parameters.

    With ``out_dir`` set, writes ``train_log.jsonl`` (deterministic),
    ``train_log.timing.jsonl`` (wall-clock), ``best.ckpt`` and ``last.ckpt``.
    """
    if not train_set or not val_set:
        raise ValueError("training and validation sets must be non-empty")
    out = Path(out_dir) if out_dir else None
    start_epoch = 0
    if resume is not None:
        params, vocab, side, adam = load_checkpoint(resume)
        start_epoch = int(side.get("epoch", 0))
        best_cider = float(side.get("best_cider", float("-inf")))
        bad_epochs = int(side.get("bad_epochs", 0))
        rng_state = side.get("rng_state")
    else:
        vocab = vocab or corpus_vocab(train_set, cfg.min_count)
        mcfg = cfg.model_config(len(vocab), _feat_dim(train_set, cfg.branch))
        params = ModelParams.init(mcfg, seed=cfg.seed)
        adam = None
        best_cider, bad_epochs, rng_state = float("-inf"), 0, None
    named = params.named_parameters()
    adam = adam or AdamState(lr=cfg.lr0)
    rng = ad.make_rng(cfg.seed + 1)
    if rng_state is not None:
        rng.bit_generator.state = rng_state_from_json(rng_state)
    result = TrainResult(params=params, vocab=vocab, best_cider=best_cider)
    best_snapshot = {k: v.data.copy() for k, v in named.items()}
    if out:
        out.mkdir(parents=True, exist_ok=True)
        mode = "a" if resume is not None else "w"
        log_fh = open(out / "train_log.jsonl", mode, encoding="utf-8")
        time_fh = open(out / "train_log.timing.jsonl", mode, encoding="utf-8")
    lcfg = cfg.loss
    n = len(train_set)
    try:
        for epoch in range(start_epoch + 1, cfg.max_epochs + 1):
            t0 = time.perf_counter()
            adam.lr = lr_schedule(epoch - 1, cfg)
            order = rng.permutation(n)
            xent_sum = attr_sum = 0.0
            n_batches = 0
            for bi, start in enumerate(range(0, n, cfg.batch_size)):
                exs = [train_set[i] for i in order[start:start + cfg.batch_size]]
                batch = make_batch(exs, vocab, cfg.branch, cfg.max_len)
                masks = sample_masks(params.config, batch.size, cfg.dropout, rng) if cfg.dropout else None
                try:
                    logits, _ = forward_teacher(params, batch, masks)
                    lb = total_loss(logits, batch, lcfg)
                    if not np.isfinite(lb.total):
                        raise NumericalError("non-finite loss")
                    ad.backward(lb.loss)
                except NumericalError as exc:
                    diag = {"epoch": epoch, "batch": bi, "param_norms": _param_norms(params)}
                    raise TrainingDiverged(f"training diverged at epoch {epoch}, batch {bi}: {exc}",
                                           diag) from None
                ad.clip_grad_norm(named, cfg.clip_norm)
                ad.adam_step(named, adam)
                xent_sum += lb.cross_entropy
                attr_sum += lb.attribute_term
                n_batches += 1
            val_cider, val_bleu4 = validate(params, val_set, vocab, cfg.val_beam, cfg.max_len)
            improved = val_cider > result.best_cider
            if improved:
                result.best_cider, result.best_epoch, bad_epochs = val_cider, epoch, 0
                best_snapshot = {k: v.data.copy() for k, v in named.items()}
            else:
                bad_epochs += 1
            rec = {"epoch": epoch, "lr": adam.lr, "xent": xent_sum / max(n_batches, 1),
                   "attr_term": attr_sum / max(n_batches, 1), "val_cider": val_cider,
                   "val_bleu4": val_bleu4}
            result.history.append(rec)
            elapsed = time.perf_counter() - t0
            if log_fn:
                log_fn(rec)
            log.info("epoch %d lr %.3g xent %.4f val_cider %.4f", epoch, adam.lr, rec["xent"], val_cider)
            if out:
                log_fh.write(json.dumps(rec) + "\n")
                log_fh.flush()
                time_fh.write(json.dumps({"epoch": epoch, "elapsed_s": round(elapsed, 3)}) + "\n")
                time_fh.flush()
                meta = {"epoch": epoch, "best_cider": result.best_cider, "bad_epochs": bad_epochs,
                        "best_epoch": result.best_epoch, "train_config": cfg.to_dict(),
                        "rng_state": rng_state_to_json(rng.bit_generator.state)}
                save_checkpoint(out / "last.ckpt", params, vocab, meta, adam)
                if improved:
                    save_checkpoint(out / "best.ckpt", params, vocab, meta)
            if cfg.patience is not None and bad_epochs >= cfg.patience:
                result.stopped_early = True
                break
    finally:
        if out:
            log_fh.close()
            time_fh.close()
    for k, v in named.items():
        v.data = best_snapshot[k]
    return result


def token_accuracy(params, examples, vocab, branch=None, max_len=MAX_LEN, batch_size=64):
    """Teacher-forced argmax accuracy over all unmasked target tokens."""
    branch = branch or params.config.branch
    correct = total = 0
    with ad.no_grad():
        for s in range(0, len(examples), batch_size):
            batch = make_batch(examples[s:s + batch_size], vocab, branch, max_len)
            logits, _ = forward_teacher(params, batch)
            pred = np.stack([lg.data.argmax(axis=-1) for lg in logits], axis=1)
            m = batch.target_mask > 0
            correct += int(((pred == batch.targets) & m).sum())
            total += int(m.sum())
    return correct / max(total, 1)
