"""Vocabulary, dataset records, feature files and the synthetic scene task."""

from __future__ import annotations

import hashlib
import json
import os
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import make_rng

PAD, START, END, UNK = "<pad>", "<start>", "<end>", "<unk>"
SPECIALS = (PAD, START, END, UNK)
N_ATTRIBUTES = 5
MAX_LEN = 30

FEATURE_MAGIC = b"LAMF"
FEATURE_VERSION = 1
_MAX_DIM = 1 << 40


class FormatError(ValueError):
    pass


class IngestionError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


_PUNCT = re.compile(r"[^\w\s<>]")


def tokenize(text):
    """Lowercase, strip punctuation, split on whitespace."""
    if isinstance(text, (list, tuple)):
        text = " ".join(text)
    return _PUNCT.sub(" ", text.lower()).split()


# ---------------------------------------------------------------- vocabulary

class Vocabulary:
    """Token <-> id map. Ids 0..3 are <pad>, <start>, <end>, <unk>."""

    def __init__(self, tokens, min_count=1):
        self.itos = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")
        self.min_count = min_count

    pad_id = 0
    start_id = 1
    end_id = 2
    unk_id = 3

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def encode_token(self, token):
        return self.stoi.get(token, self.unk_id)

    def decode_id(self, idx):
        return self.itos[idx]

    def encode(self, tokens):
        return [self.stoi.get(t, self.unk_id) for t in tokens]

    def decode(self, ids, strip=True):
        out = []
        for i in ids:
            tok = self.itos[int(i)]
            if strip and tok in SPECIALS:
                if tok == END:
                    break
                continue
            out.append(tok)
        return out

    def normalize(self, tokens):
        """Map out-of-vocabulary tokens to <unk>."""
        return [t if t in self.stoi else UNK for t in tokens]

    def digest(self):
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()[:16]

    def to_dict(self):
        return {"itos": self.itos, "min_count": self.min_count}

    @classmethod
    def from_dict(cls, d):
        itos = d["itos"]
        if tuple(itos[:4]) != SPECIALS:
            raise ValueError("vocabulary does not start with the reserved tokens")
        return cls(itos[4:], min_count=d.get("min_count", 1))


def build_vocab(captions, min_count=5):
    """Keep tokens seen at least ``min_count`` times.

    Ids go by descending frequency, ties broken lexicographically.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter()
    for cap in captions:
        counts.update(tokenize(cap) if isinstance(cap, str) else cap)
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in SPECIALS),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(kept, min_count=min_count)


# ------------------------------------------------------------------- records

@dataclass
class CaptionExample:
    """One modification record; captions are token lists (strings).

    ``image_features`` is (p + 1, d_v) with the global row last;
    ``region_features`` is (k, d_b) or None.
    """

    id: str
    image_features: np.ndarray | None
    existing: list
    attributes: list
    gold: list
    region_features: np.ndarray | None = None
    policy: str = "none"

    def validate(self, max_len=MAX_LEN):
        if len(self.attributes) != N_ATTRIBUTES:
            raise ValueError(f"example {self.id}: expected {N_ATTRIBUTES} attributes, "
                             f"got {len(self.attributes)}")
        if not self.gold:
            raise ValueError(f"example {self.id}: no gold captions")
        for cap in [self.existing, *self.gold]:
            if len(cap) > max_len:
                raise ValueError(f"example {self.id}: caption longer than {max_len}")
        return self


def attributes_from_caption(tokens, fillers=(), n=N_ATTRIBUTES, stopwords=None):
    """Top-n content words by frequency (ties by first appearance), padded from ``fillers``."""
    stop = STOPWORDS if stopwords is None else stopwords
    content = [t for t in tokens if t not in stop and t not in SPECIALS]
    counts = Counter(content)
    first = {}
    for i, t in enumerate(content):
        first.setdefault(t, i)
    ranked = sorted(counts, key=lambda t: (-counts[t], first[t]))[:n]
    for f in fillers:
        if len(ranked) >= n:
            break
        if f not in ranked:
            ranked.append(f)
    while ranked and len(ranked) < n:
        ranked.append(ranked[-1])
    if not ranked:
        ranked = [UNK] * n
    return ranked


STOPWORDS = frozenset({"a", "an", "the", "on", "to", "next", "of", "in", "with", "and", "is"})


# ------------------------------------------------------------ feature files

def write_features(path, matrix):
    """LAMF: magic | version u32 | ndims u32 | dims u64... | float32 payload, all little-endian."""
    arr = np.ascontiguousarray(np.asarray(matrix, dtype="<f4"))
    header = FEATURE_MAGIC + struct.pack("<II", FEATURE_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def parse_features(buf):
    if len(buf) < 12:
        raise FormatError(f"truncated header at byte offset {len(buf)} (need 12)")
    if buf[:4] != FEATURE_MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r} at byte offset 0")
    version, ndims = struct.unpack_from("<II", buf, 4)
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported version {version} at byte offset 4")
    if ndims > 8:
        raise FormatError(f"implausible ndims {ndims} at byte offset 8")
    end_dims = 12 + 8 * ndims
    if len(buf) < end_dims:
        raise FormatError(f"truncated dims at byte offset {len(buf)} (need {end_dims})")
    dims = struct.unpack_from(f"<{ndims}Q", buf, 12)
    count = 1
    for i, d in enumerate(dims):
        if d >= _MAX_DIM:
            raise FormatError(f"dimension overflow ({d}) at byte offset {12 + 8 * i}")
        count *= d
        if count * 4 >= _MAX_DIM:
            raise FormatError(f"dimension overflow at byte offset {12 + 8 * i}")
    need = end_dims + 4 * count
    if len(buf) < need:
        raise FormatError(f"truncated payload at byte offset {len(buf)} (need {need})")
    if len(buf) > need:
        raise FormatError(f"trailing bytes at byte offset {need}")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=end_dims)
    return data.reshape(dims).astype(np.float32)


def read_features(path):
    with open(path, "rb") as fh:
        return parse_features(fh.read())


# ------------------------------------------------------------- JSONL dataset

def _caption_tokens(value):
    return tokenize(value) if isinstance(value, str) else list(value)


def write_jsonl_dataset(examples, out_dir, name="data.jsonl"):
    """Write examples as JSONL plus one LAMF file per feature matrix."""
    out = Path(out_dir)
    feat_dir = out / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for ex in examples:
        rec = {"id": ex.id}
        img = feat_dir / f"{ex.id}.img.lamf"
        write_features(img, ex.image_features)
        rec["image_features_path"] = os.path.relpath(img, out)
        if ex.region_features is not None:
            reg = feat_dir / f"{ex.id}.reg.lamf"
            write_features(reg, ex.region_features)
            rec["region_features_path"] = os.path.relpath(reg, out)
        rec["existing"] = " ".join(ex.existing)
        rec["attributes"] = list(ex.attributes)
        rec["gold"] = [" ".join(g) for g in ex.gold]
        rec["policy"] = ex.policy
        lines.append(json.dumps(rec, sort_keys=True))
    path = out / name
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_jsonl_dataset(path):
    path = Path(path)
    base = path.parent
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                img = read_features(base / rec["image_features_path"])
                reg = rec.get("region_features_path")
                ex = CaptionExample(
                    id=str(rec.get("id", lineno)),
                    image_features=img,
                    region_features=read_features(base / reg) if reg else None,
                    existing=_caption_tokens(rec["existing"]),
                    attributes=[t for a in rec["attributes"] for t in tokenize(a)],
                    gold=[_caption_tokens(g) for g in rec["gold"]],
                    policy=rec.get("policy", "none"),
                )
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise IngestionError(f"{path}:{lineno}: {exc!r}") from None
            examples.append(ex)
    return examples


# ---------------------------------------------------------------- COCO JSON

def load_coco_json(path, vocab=None, split=None, max_len=MAX_LEN):
    """Karpathy-style JSON: {"images": [{id, split, sentences: [{tokens}]}]}.

    One example per image with every sentence as a reference. Features are
    not part of this format, so ``image_features`` stays None; attributes are
    derived from the references.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise IngestionError(f"{path}: malformed JSON: {exc}") from None
    except OSError as exc:
        raise IngestionError(f"{path}: {exc}") from None
    try:
        images = doc["images"]
        examples = []
        for i, img in enumerate(images):
            if split is not None and img.get("split") != split:
                continue
            image_id = img.get("id", img.get("cocoid", img.get("imgid")))
            if image_id is None:
                raise KeyError(f"images[{i}].id")
            refs = []
            for sent in img["sentences"]:
                toks = sent["tokens"] if "tokens" in sent else tokenize(sent["raw"])
                toks = [t.lower() for t in toks][:max_len]
                refs.append(vocab.normalize(toks) if vocab is not None else toks)
            if not refs:
                raise KeyError(f"images[{i}].sentences is empty")
            pooled = [t for r in refs for t in r if t != UNK]
            examples.append(CaptionExample(
                id=str(image_id), image_features=None, existing=[],
                attributes=attributes_from_caption(pooled), gold=refs))
    except (KeyError, TypeError) as exc:
        raise IngestionError(f"{path}: missing field {exc}") from None
    return examples


# ---------------------------------------------------------- synthetic scenes

POLICIES = ("swap-word", "delete-span", "wrong-object", "none")


@dataclass
class SyntheticSceneSpec:
    """Grammar and corruption policy of the synthetic captioning task.

    A scene is a ``grid x grid`` board with two distinct objects on a
    background. Captions read ``a <color> <obj> <relation> a <color> <obj>
    on the <place>``, the relation following the objects' grid rows.
    """

    grid: int = 3
    objects: dict = field(default_factory=lambda: {
        "cat": ("cat", "kitten"),
        "dog": ("dog", "puppy"),
        "horse": ("horse", "pony"),
        "bird": ("bird", "sparrow"),
        "car": ("car", "sedan"),
        "boat": ("boat", "ship"),
        "man": ("man", "guy"),
        "ball": ("ball", "sphere"),
    })
    colors: tuple = ("red", "blue", "green", "yellow", "black", "white")
    places: tuple = ("grass", "beach", "snow", "street")
    corruption: dict = field(default_factory=lambda: {
        "swap-word": 0.25, "delete-span": 0.25, "wrong-object": 0.25, "none": 0.25})
    noise: float = 0.1
    max_refs: int = 4

    def __post_init__(self):
        unknown = set(self.corruption) - set(POLICIES)
        if unknown:
            raise ValueError(f"unknown corruption policies {sorted(unknown)}")
        total = sum(self.corruption.values())
        if total <= 0 or any(p < 0 for p in self.corruption.values()):
            raise ValueError("corruption probabilities must be non-negative with positive sum")
        if self.grid < 2 or len(self.objects) < 3:
            raise ValueError("need grid >= 2 and at least 3 object categories")

    @property
    def categories(self):
        return sorted(self.objects)

    @property
    def feature_dim(self):
        return len(self.objects) + len(self.colors) + len(self.places) + 2 * self.grid

    @property
    def region_dim(self):
        return self.feature_dim

    def lexicon(self):
        words = {"a", "on", "the", "next", "to", "above", "below"}
        words.update(self.colors)
        words.update(self.places)
        for syns in self.objects.values():
            words.update(syns)
        return sorted(words)

    def to_dict(self):
        return {"grid": self.grid, "objects": {k: list(v) for k, v in self.objects.items()},
                "colors": list(self.colors), "places": list(self.places),
                "corruption": dict(self.corruption), "noise": self.noise,
                "max_refs": self.max_refs}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "objects" in d:
            d["objects"] = {k: tuple(v) for k, v in d["objects"].items()}
        for key in ("colors", "places"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _relation(row1, row2):
    if row1 < row2:
        return ["above"]
    if row1 > row2:
        return ["below"]
    return ["next", "to"]


def render_caption(first, second, place):
    """``first``/``second`` are (color, word, row) triples."""
    c1, w1, r1 = first
    c2, w2, r2 = second
    return ["a", c1, w1, *_relation(r1, r2), "a", c2, w2, "on", "the", place]


def _cell_code(spec, category, color, place, row, col):
    cats = spec.categories
    v = np.zeros(spec.feature_dim)
    off = 0
    if category is not None:
        v[cats.index(category)] = 1.0
    off += len(cats)
    if color is not None:
        v[off + spec.colors.index(color)] = 1.0
    off += len(spec.colors)
    v[off + spec.places.index(place)] = 1.0
    off += len(spec.places)
    v[off + row] = 1.0
    v[off + spec.grid + col] = 1.0
    return v


def _corrupt(spec, rng, gold, policy, scene):
    cap = list(gold)
    if policy == "none":
        return cap
    (c1, w1, _), (c2, w2, _), _place = scene
    i_c1, i_w1 = 1, 2
    i_c2, i_w2 = len(cap) - 5, len(cap) - 4
    if policy == "swap-word":
        choices = ["nouns"] + (["colors"] if c1 != c2 else [])
        which = choices[int(rng.integers(len(choices)))]
        i, j = (i_w1, i_w2) if which == "nouns" else (i_c1, i_c2)
        cap[i], cap[j] = cap[j], cap[i]
    elif policy == "delete-span":
        spans = [(len(cap) - 3, len(cap)), (i_c1, i_c1 + 1), (i_c2, i_c2 + 1)]
        lo, hi = spans[int(rng.integers(len(spans)))]
        del cap[lo:hi]
    elif policy == "wrong-object":
        present = {cat for cat, syns in spec.objects.items() if w1 in syns or w2 in syns}
        others = [c for c in spec.categories if c not in present]
        if not others:
            raise GenerationError("wrong-object corruption needs a category outside the scene")
        cat = others[int(rng.integers(len(others)))]
        syns = spec.objects[cat]
        word = syns[int(rng.integers(len(syns)))]
        i = (i_w1, i_w2)[int(rng.integers(2))]
        cap[i] = word
    else:
        raise GenerationError(f"unknown corruption policy {policy!r}")
    if cap == list(gold):
        raise GenerationError(f"policy {policy!r} left the caption unchanged")
    return cap


def generate_synthetic(spec, n, seed):
    """Deterministic synthetic modification dataset of ``n`` examples."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = make_rng(seed)
    cats = spec.categories
    policies = sorted(spec.corruption)
    probs = np.array([spec.corruption[p] for p in policies], dtype=np.float64)
    probs /= probs.sum()
    g = spec.grid
    examples = []
    for idx in range(n):
        # mention order follows category order, so a caption is a function of its scene
        pick = np.sort(rng.choice(len(cats), size=2, replace=False))
        cells = rng.choice(g * g, size=2, replace=False)
        colors = [spec.colors[int(rng.integers(len(spec.colors)))] for _ in range(2)]
        place = spec.places[int(rng.integers(len(spec.places)))]
        objs = []
        for k in range(2):
            cat = cats[int(pick[k])]
            row, col = divmod(int(cells[k]), g)
            syn = spec.objects[cat][int(rng.integers(len(spec.objects[cat])))]
            objs.append((cat, colors[k], syn, row, col))

        grid_rows = []
        occupied = {(o[3], o[4]): o for o in objs}
        for r in range(g):
            for c in range(g):
                o = occupied.get((r, c))
                grid_rows.append(_cell_code(spec, o[0] if o else None, o[1] if o else None,
                                            place, r, c))
        cells_arr = np.array(grid_rows)
        cells_arr += spec.noise * rng.standard_normal(cells_arr.shape)
        image = np.vstack([cells_arr, cells_arr.mean(axis=0, keepdims=True)])

        regions = []
        for cat, color, _syn, row, col in objs:
            regions.append(_cell_code(spec, cat, color, place, row, col))
        regions.append(_cell_code(spec, None, None, place, 0, 0) * 0.5)
        regions = np.array(regions) + spec.noise * rng.standard_normal((3, spec.feature_dim))

        first = (objs[0][1], objs[0][2], objs[0][3])
        second = (objs[1][1], objs[1][2], objs[1][3])
        gold0 = render_caption(first, second, place)
        refs = [gold0]
        alt1 = spec.objects[objs[0][0]]
        alt2 = spec.objects[objs[1][0]]
        for s1 in alt1:
            for s2 in alt2:
                cap = render_caption((first[0], s1, first[2]), (second[0], s2, second[2]), place)
                if cap not in refs and len(refs) < spec.max_refs:
                    refs.append(cap)

        policy = policies[int(rng.choice(len(policies), p=probs))]
        scene = (first, second, place)
        existing = _corrupt(spec, rng, gold0, policy, scene)
        attrs = attributes_from_caption(gold0, fillers=[objs[0][0], objs[1][0], place])
        examples.append(CaptionExample(
            id=f"syn{seed}_{idx:06d}",
            image_features=image.astype(np.float32),
            region_features=regions.astype(np.float32),
            existing=existing, attributes=attrs, gold=refs, policy=policy))
    return examples
