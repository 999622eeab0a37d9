"""Synthetic corpus generation, vocabulary, and on-disk formats.

The toy grammar renders short clips as feature pairs plus reference
captions.  Content features identify a subject and an object noun;
motion features identify a motion class; the verb is looked up in a
rule table indexed by (subject class, motion class), so predicting it
requires reading both modalities.  Each clip is captioned under several
sentence plans (article-led and number-led) that share those facts, so
plan choice is information the features cannot settle.  Every surface
word carries exactly one tag, which is what makes rule-based tagging
and controllable editing measurable downstream.

Binary formats are fixed little-endian layouts documented in
docs/FORMATS.md: feature files carry a 16-byte header (magic "FSEQ",
version, rows, cols) and float32 row-major payload; checkpoint files
carry named float32 tensors plus a JSON metadata trailer under magic
"CKPT".  JSON artifacts are UTF-8 with sorted keys.
"""

from __future__ import annotations

import json
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError, FormatError
from .fusion import FeatureClip
from .posgen import EOS_TAG, POS_TAGS, PosSequence

FSEQ_MAGIC = b"FSEQ"
FSEQ_VERSION = 1
CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1

# vocabulary specials, appended after content tokens in this order
BOS_TOKEN = "<bos>"
EOS_TOKEN = "<eos>"
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
SPECIALS = (BOS_TOKEN, EOS_TOKEN, PAD_TOKEN, UNK_TOKEN)


# -- vocabulary -------------------------------------------------------


@dataclass
class Vocabulary:
    tokens: list[str]
    ids: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self.ids) != len(self.tokens):
            raise DomainError("duplicate tokens in vocabulary")
        for s in SPECIALS:
            if s not in self.ids:
                raise DomainError(f"vocabulary missing special {s}")

    def __len__(self):
        return len(self.tokens)

    @property
    def bos_id(self) -> int:
        return self.ids[BOS_TOKEN]

    @property
    def eos_id(self) -> int:
        return self.ids[EOS_TOKEN]

    @property
    def unk_id(self) -> int:
        return self.ids[UNK_TOKEN]

    def encode(self, words: list[str]) -> list[int]:
        """BOS-led, EOS-terminated id sequence; unknown words map to UNK."""
        body = [self.ids.get(w, self.unk_id) for w in words]
        return [self.bos_id] + body + [self.eos_id]

    def decode(self, ids: list[int]) -> list[str]:
        """Surface words only; leading BOS and trailing EOS stripped."""
        words = []
        for i in ids:
            if i == self.bos_id:
                continue
            if i == self.eos_id:
                break
            words.append(self.tokens[i])
        return words


def build_vocab(captions: list[list[str]], min_count: int = 1) -> Vocabulary:
    """Content tokens by frequency (desc) then lexicographic, specials last.

    Tokens seen fewer than min_count times are left out and encode to
    the unknown id.
    """
    if not captions:
        raise DomainError("build_vocab: no captions")
    counts = Counter()
    for cap in captions:
        counts.update(cap)
    kept = [w for w in counts if counts[w] >= min_count]
    ordered = sorted(kept, key=lambda w: (-counts[w], w))
    return Vocabulary(tokens=ordered + list(SPECIALS))


# -- toy grammar ------------------------------------------------------


@dataclass
class ToyGrammarSpec:
    """Lexicons, templates and the cross-modal verb rule.

    verb_rule[noun_class][motion_class] is a verb index; rows are
    permutations (a Latin square when square), so the subject class
    alone gives no information about the verb.
    """

    nouns: list[str]
    noun_classes: list[int]
    verbs: list[str]
    verb_rule: list[list[int]]
    n_motion_classes: int
    articles: list[str]
    number_words: list[str]
    adjectives: list[str]
    template_mix: list[str]
    content_dim: int
    motion_dim: int
    pad_len: int
    min_length: int
    feature_noise: float
    adverbs: list[str] = field(default_factory=list)
    refs_per_clip: int = 3

    def __post_init__(self):
        if len(self.nouns) != len(self.noun_classes):
            raise DomainError("nouns and noun_classes must align")
        n_classes = max(self.noun_classes) + 1
        if len(self.verb_rule) != n_classes:
            raise DomainError("verb_rule must have one row per noun class")
        for row_ in self.verb_rule:
            if len(row_) != self.n_motion_classes:
                raise DomainError("verb_rule rows must span motion classes")
            for v in row_:
                if not (0 <= v < len(self.verbs)):
                    raise DomainError(f"verb index {v} out of range")
        lexicon_for = {"NOUN": self.nouns, "VERB": self.verbs,
                       "ART": self.articles, "NUM": self.number_words,
                       "ADJ": self.adjectives, "ADV": self.adverbs}
        for name in self.template_mix:
            if name not in TEMPLATES:
                raise DomainError(f"unknown template {name!r}")
        # every template can appear: clips are referenced under the full
        # trio of plans regardless of which primaries the mix names
        for name in sorted(TEMPLATES):
            for slot in TEMPLATES[name]:
                if not lexicon_for[slot]:
                    raise ConfigError(
                        f"template {name!r} needs a {slot} lexeme but the "
                        f"lexicon is empty")
        if not (0 < self.min_length <= self.pad_len):
            raise DomainError("min_length must lie in (0, pad_len]")
        if self.content_dim % 2 != 0:
            raise DomainError("content_dim must be even (subject and object halves)")
        lex = self.lexicon()
        for word, tag in lex.items():
            if tag not in POS_TAGS:
                raise DomainError(f"lexeme {word!r} has unknown tag {tag!r}")

    def lexicon(self) -> dict[str, str]:
        lex = {}
        for w in self.nouns:
            lex[w] = "NOUN"
        for w in self.verbs:
            lex[w] = "VERB"
        for w in self.articles:
            lex[w] = "ART"
        for w in self.number_words:
            lex[w] = "NUM"
        for w in self.adjectives:
            lex[w] = "ADJ"
        for w in self.adverbs:
            lex[w] = "ADV"
        return lex

    def to_dict(self) -> dict:
        return {
            "nouns": self.nouns, "noun_classes": self.noun_classes,
            "verbs": self.verbs, "verb_rule": self.verb_rule,
            "n_motion_classes": self.n_motion_classes,
            "articles": self.articles, "number_words": self.number_words,
            "adjectives": self.adjectives, "adverbs": self.adverbs,
            "template_mix": self.template_mix,
            "content_dim": self.content_dim, "motion_dim": self.motion_dim,
            "pad_len": self.pad_len, "min_length": self.min_length,
            "feature_noise": self.feature_noise,
            "refs_per_clip": self.refs_per_clip,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToyGrammarSpec":
        return cls(**d)


# template name -> tag slots; word realization handled in _render
# Tails deliberately differ across templates: a recurrent summary of the
# tag sequence keeps its identity only if the sequences do not converge
# onto a shared suffix before the summary is read off.
TEMPLATES = {
    "svo": ("ART", "NOUN", "VERB", "ART", "NOUN"),
    "num": ("NUM", "NOUN", "VERB", "ART", "NOUN", "ADV"),
    "adj": ("ART", "ADJ", "NOUN", "VERB", "ART", "NOUN"),
}


def default_grammar(content_dim: int = 16, motion_dim: int = 12,
                    pad_len: int = 12, feature_noise: float = 0.12) -> ToyGrammarSpec:
    """Nine nouns in three classes, three motions, cyclic verb rule."""
    return ToyGrammarSpec(
        nouns=["dog", "cat", "bird", "car", "truck", "bike", "man", "woman", "kid"],
        noun_classes=[0, 0, 0, 1, 1, 1, 2, 2, 2],
        verbs=["chases", "follows", "passes"],
        verb_rule=[[0, 1, 2], [1, 2, 0], [2, 0, 1]],
        n_motion_classes=3,
        articles=["the", "a"],
        number_words=["two", "three"],
        adjectives=["big", "small", "red"],
        adverbs=["quickly", "slowly"],
        template_mix=["svo", "svo", "adj", "adj"],
        content_dim=content_dim,
        motion_dim=motion_dim,
        pad_len=pad_len,
        min_length=max(1, pad_len // 2),
        feature_noise=feature_noise,
    )


@dataclass
class ClipSeed:
    """Latent state behind one clip; everything observable derives from it."""

    subject: int
    obj: int
    motion: int


def clip_template(spec: ToyGrammarSpec, seed: ClipSeed) -> str:
    """Primary template: a subject-class x motion lookup, mirroring the
    verb rule.  Syntax stays predictable from the features, but reading
    it takes both streams together, so a pooled syntax summary is worth
    depending on downstream."""
    mix = spec.template_mix
    cell = spec.noun_classes[seed.subject] * spec.n_motion_classes + seed.motion
    return mix[cell % len(mix)]


def clip_templates(spec: ToyGrammarSpec, seed: ClipSeed) -> list[str]:
    """Templates for a clip's references, in reference order.

    The feature-determined primary comes first, followed by the number-led
    template and then the remaining one, so with three references every
    clip is described under all three plans.  The plans describe the same
    features, so which one a caption follows is exactly the information
    the syntax summary carries and the features cannot settle — a decoder
    trained this way has to read the summary, which is what makes tag
    edits steer the caption instead of being drowned out by the visual
    evidence.  Two of the three plans are article-led, so a greedy tag
    decode opens with ART and the number-led plan stays reachable through
    an explicit first-tag edit.  Fewer references truncate the list.
    """
    primary = clip_template(spec, seed)
    return [primary] + [t for t in ("num", "svo", "adj") if t != primary][:2]


def render_captions(spec: ToyGrammarSpec, seed: ClipSeed) -> list[tuple[list[str], list[str]]]:
    """All references for a clip: (tokens, tags) pairs, tags without EOS.

    References cycle through the clip's templates and vary the article,
    so the same subject/verb/object appears under article-led and
    number-led plans.
    """
    templates = clip_templates(spec, seed)
    verb = spec.verbs[spec.verb_rule[spec.noun_classes[seed.subject]][seed.motion]]
    adj = spec.adjectives[seed.subject % len(spec.adjectives)]
    num = spec.number_words[(seed.subject + seed.motion) % len(spec.number_words)]
    out = []
    for r in range(spec.refs_per_clip):
        template = TEMPLATES[templates[r % len(templates)]]
        article = spec.articles[r % len(spec.articles)]
        words = []
        noun_at = 0
        for slot in template:
            if slot == "ART":
                words.append(article)
            elif slot == "NOUN":
                words.append(spec.nouns[seed.subject if noun_at == 0 else seed.obj])
                noun_at += 1
            elif slot == "VERB":
                words.append(verb)
            elif slot == "ADJ":
                words.append(adj)
            elif slot == "NUM":
                words.append(num)
            elif slot == "ADV":
                words.append(spec.adverbs[seed.motion % len(spec.adverbs)])
            else:
                raise DomainError(f"unhandled slot {slot}")
        out.append((words, list(template)))
    return out


def tag_tokens(tokens: list[str], lexicon: dict[str, str]) -> PosSequence:
    """Rule-based tagging by lexicon lookup; unknown tokens get UNK."""
    return PosSequence([lexicon.get(t, "UNK") for t in tokens] + [EOS_TAG])


class _FeatureRenderer:
    """Maps latent clip state to padded feature matrices."""

    def __init__(self, spec: ToyGrammarSpec, rng: np.random.Generator):
        half = spec.content_dim // 2
        self.spec = spec
        self.subject_basis = rng.normal(size=(len(spec.nouns), half))
        self.object_basis = rng.normal(size=(len(spec.nouns), half))
        self.motion_basis = rng.normal(size=(spec.n_motion_classes, spec.motion_dim))

    def render(self, seed: ClipSeed, true_length: int,
               rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        spec = self.spec
        base_c = np.concatenate([self.subject_basis[seed.subject],
                                 self.object_basis[seed.obj]])
        base_m = self.motion_basis[seed.motion]
        content = np.zeros((spec.pad_len, spec.content_dim))
        motion = np.zeros((spec.pad_len, spec.motion_dim))
        for i in range(true_length):
            content[i] = base_c + spec.feature_noise * rng.normal(size=spec.content_dim)
            motion[i] = base_m + spec.feature_noise * rng.normal(size=spec.motion_dim)
        # mirror the float32 storage so in-memory and reloaded features agree
        return (content.astype(np.float32).astype(np.float64),
                motion.astype(np.float32).astype(np.float64))


# -- synthesis --------------------------------------------------------


def synth_corpus(spec: ToyGrammarSpec, out_dir: str | Path, seed: int,
                 n_train: int, n_val: int, n_test: int) -> Path:
    """Write features, manifest and vocabulary; returns the manifest path.

    Fully deterministic for a given (spec, seed, split sizes): the same
    call writes byte-identical files.
    """
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(seed)
    basis_rng = np.random.default_rng(root.spawn(1)[0])
    renderer = _FeatureRenderer(spec, basis_rng)
    lexicon = spec.lexicon()

    manifest = {"seed": seed, "grammar": spec.to_dict(), "splits": {}}
    counter = 0
    for split, count in (("train", n_train), ("val", n_val), ("test", n_test)):
        clips = []
        for k in range(count):
            rng = np.random.default_rng(np.random.SeedSequence((seed, 1000 + counter)))
            counter += 1
            latent = ClipSeed(subject=int(rng.integers(len(spec.nouns))),
                              obj=int(rng.integers(len(spec.nouns))),
                              motion=int(rng.integers(spec.n_motion_classes)))
            true_length = int(rng.integers(spec.min_length, spec.pad_len + 1))
            content, motion = renderer.render(latent, true_length, rng)
            clip_id = f"{split}_{k:04d}"
            cpath = f"features/{clip_id}.content.fseq"
            mpath = f"features/{clip_id}.motion.fseq"
            save_features(out / cpath, content)
            save_features(out / mpath, motion)
            captions = []
            for words, tags in render_captions(spec, latent):
                tagged = tag_tokens(words, lexicon)
                if tagged.tags[:-1] != tags:
                    raise DomainError(f"tagger disagrees with template on {words}")
                captions.append({"tokens": words, "tags": tagged.tags})
            clips.append({
                "clip_id": clip_id,
                "content_path": cpath,
                "motion_path": mpath,
                "true_length": true_length,
                "latent": {"subject": latent.subject, "object": latent.obj,
                           "motion": latent.motion,
                           "templates": clip_templates(spec, latent)},
                "captions": captions,
            })
        manifest["splits"][split] = clips

    vocab = build_vocab([cap["tokens"] for c in manifest["splits"]["train"]
                         for cap in c["captions"]])
    write_json(out / "vocab.json", {"tokens": vocab.tokens})
    manifest_path = out / "manifest.json"
    write_json(manifest_path, manifest)
    return manifest_path


def write_json(path: str | Path, payload: dict) -> None:
    Path(path).write_text(
        json.dumps(payload, sort_keys=True, indent=1, ensure_ascii=False) + "\n",
        encoding="utf-8")


def read_json(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc


# -- feature files ----------------------------------------------------


def save_features(path: str | Path, matrix: np.ndarray) -> None:
    if matrix.ndim != 2:
        raise FormatError(f"feature matrix must be 2-D, got shape {matrix.shape}")
    m, d = matrix.shape
    header = FSEQ_MAGIC + struct.pack("<III", FSEQ_VERSION, m, d)
    payload = np.ascontiguousarray(matrix, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def load_features(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{path}: header needs 16 bytes, file has {len(raw)}")
    magic = raw[:4]
    if magic != FSEQ_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {FSEQ_MAGIC!r}")
    version, m, d = struct.unpack("<III", raw[4:16])
    if version != FSEQ_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = 16 + 4 * m * d
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {m}x{d}, got {len(raw)}")
    flat = np.frombuffer(raw, dtype="<f4", offset=16)
    return flat.reshape(m, d).astype(np.float64)


# -- checkpoints ------------------------------------------------------


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray],
                    meta: dict) -> None:
    """Named float32 tensors in sorted-name order plus a JSON trailer."""
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    meta_blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks.append(struct.pack("<I", len(meta_blob)))
    chunks.append(meta_blob)
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Arrays come back as float64 views of the stored float32 values."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version, count = struct.unpack("<II", raw[4:12])
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    arrays: dict[str, np.ndarray] = {}

    def take(n, what):
        nonlocal off
        if off + n > len(raw):
            raise FormatError(f"{path}: truncated reading {what} "
                              f"(need {off + n} bytes, file has {len(raw)})")
        piece = raw[off:off + n]
        off += n
        return piece

    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "shape"))
        n_items = int(np.prod(shape)) if rank else 1
        payload = take(4 * n_items, f"tensor {name}")
        arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)
    (meta_len,) = struct.unpack("<I", take(4, "meta length"))
    meta = json.loads(take(meta_len, "meta").decode("utf-8"))
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    return arrays, meta


# -- dataset loading --------------------------------------------------


@dataclass
class ClipExample:
    clip: FeatureClip
    captions: list[dict]        # {"tokens": [...], "tags": [...]}
    latent: dict

    def gold_tags(self) -> PosSequence:
        return PosSequence(list(self.captions[0]["tags"]))

    def tag_references(self) -> list[PosSequence]:
        """One gold tag plan per reference (plans may differ per clip)."""
        return [PosSequence(list(c["tags"])) for c in self.captions]

    def references(self) -> list[list[str]]:
        return [list(c["tokens"]) for c in self.captions]


@dataclass
class Dataset:
    root: Path
    grammar: ToyGrammarSpec
    seed: int
    splits: dict[str, list[ClipExample]]
    vocab: Vocabulary

    def split(self, name: str) -> list[ClipExample]:
        if name not in self.splits:
            raise DomainError(f"no split {name!r}; have {sorted(self.splits)}")
        return self.splits[name]


def load_dataset(data_dir: str | Path) -> Dataset:
    """Load manifest, features and vocabulary; validates tag alignment."""
    root = Path(data_dir)
    manifest = read_json(root / "manifest.json")
    grammar = ToyGrammarSpec.from_dict(manifest["grammar"])
    vocab = Vocabulary(tokens=list(read_json(root / "vocab.json")["tokens"]))
    splits: dict[str, list[ClipExample]] = {}
    for split, clips in manifest["splits"].items():
        examples = []
        for rec in clips:
            content = load_features(root / rec["content_path"])
            motion = load_features(root / rec["motion_path"])
            clip = FeatureClip(clip_id=rec["clip_id"], content=content,
                               motion=motion, true_length=rec["true_length"])
            clip.validate(grammar.pad_len, grammar.content_dim, grammar.motion_dim)
            if not rec["captions"]:
                raise FormatError(f"{rec['clip_id']}: no captions")
            for cap in rec["captions"]:
                if len(cap["tags"]) != len(cap["tokens"]) + 1:
                    raise FormatError(
                        f"{rec['clip_id']}: tags must be tokens plus terminal "
                        f"({len(cap['tags'])} vs {len(cap['tokens'])})")
                PosSequence(list(cap["tags"]))
            examples.append(ClipExample(clip=clip, captions=rec["captions"],
                                        latent=rec.get("latent", {})))
        splits[split] = examples
    return Dataset(root=root, grammar=grammar, seed=manifest["seed"],
                   splits=splits, vocab=vocab)
