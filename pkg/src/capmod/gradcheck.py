"""Finite-difference verification of the full model's backward pass at tiny dims."""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .corpus import N_ATTRIBUTES, CaptionExample, Vocabulary
from .decoder import ModelConfig, ModelParams, forward_teacher, make_batch
from .objective import cross_entropy

TOLERANCE = 1e-4


@dataclass
class GradCheckDims:
    d: int = 8
    hidden: int = 12
    emb: int = 8
    att: int = 8
    vocab: int = 20
    p: int = 4
    k: int = 3
    feat_dim: int = 6
    batch: int = 3
    caption_len: int = 4

    @classmethod
    def parse(cls, text):
        """``"d=8,hidden=12"`` style overrides."""
        out = cls()
        if not text:
            return out
        for item in text.split(","):
            key, _, val = item.partition("=")
            key = key.strip()
            if not hasattr(out, key) or not val:
                raise ValueError(f"bad --dims entry {item!r}")
            setattr(out, key, int(val))
        if out.vocab < 4 + N_ATTRIBUTES:
            raise ValueError("vocab must leave room for the specials and 5 attribute words")
        return out


def random_problem(dims, seed, branch):
    """Random vocabulary, examples and model; one example has an empty existing caption."""
    rng = ad.make_rng(seed)
    words = [f"w{i}" for i in range(dims.vocab - 4)]
    vocab = Vocabulary(words)

    def caption(n):
        return [words[i] for i in rng.integers(len(words), size=n)]

    examples = []
    for b in range(dims.batch):
        existing = [] if b == 0 else caption(int(rng.integers(1, dims.caption_len + 1)))
        attrs = [words[i] for i in rng.choice(len(words), N_ATTRIBUTES, replace=False)]
        gold = [caption(int(rng.integers(1, dims.caption_len + 1)))]
        examples.append(CaptionExample(
            id=f"gc{b}", image_features=rng.standard_normal((dims.p + 1, dims.feat_dim)),
            existing=existing, attributes=attrs, gold=gold,
            region_features=rng.standard_normal((dims.k, dims.feat_dim))))
    cfg = ModelConfig(vocab_size=len(vocab), feat_dim=dims.feat_dim, d=dims.d, hidden=dims.hidden,
                      emb=dims.emb, att=dims.att, branch=branch, dtype="float64")
    params = ModelParams.init(cfg, seed=seed)
    batch = make_batch(examples, vocab, branch)
    keep = 0.7
    masks = {key: (rng.random((dims.batch, n)) < keep) / keep
             for key, n in (("x1", cfg.x1_dim), ("x2", cfg.x2_dim), ("h2", cfg.hidden))}
    return params, batch, masks


def model_loss_fn(params, batch, masks):
    def fn():
        logits, _ = forward_teacher(params, batch, masks)
        return cross_entropy([ad.log_softmax(lg) for lg in logits], batch.targets, batch.target_mask)
    return fn


def run(dims=None, seed=0, branches=("spatial", "region"), max_entries=64):
    """Returns {branch: {group: (max rel error, max abs error, entries checked)}}."""
    dims = dims or GradCheckDims()
    report = {}
    for branch in branches:
        params, batch, masks = random_problem(dims, seed, branch)
        named = params.named_parameters()
        per_tensor = ad.check_gradients(model_loss_fn(params, batch, masks), named,
                                        max_entries=max_entries, rng=ad.make_rng(seed + 1))
        groups = {}
        for group, names in params.groups().items():
            rel = max(per_tensor[n].rel_error for n in names)
            absd = max(per_tensor[n].max_abs_error for n in names)
            checked = sum(per_tensor[n].checked for n in names)
            groups[group] = (rel, absd, checked)
        report[branch] = groups
    return report


def passed(report, tol=TOLERANCE):
    return all(rel < tol for groups in report.values() for rel, _, _ in groups.values())


def format_report(report, tol=TOLERANCE):
    lines = []
    for branch, groups in report.items():
        for group, (rel, absd, checked) in groups.items():
            status = "ok" if rel < tol else "FAIL"
            lines.append(f"{branch:8s} {group:10s} rel={rel:.3e} abs={absd:.3e} n={checked:4d} {status}")
    return "\n".join(lines)
