"""Tokenisation, noun tagging and the object/relation split of a caption.

A caption such as ``several men in hard hats ...`` becomes an object
sequence of ``(TAG@index, word)`` pairs and a relation sequence in which
every noun is replaced by its placeholder::

    objects:  NNS@0 men NNS@1 hats NN@0 pulley NN@1 system
    relation: several NNS@0 in hard NNS@1 are operating a giant NN@0 NN@1 .
"""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Protocol, Sequence

NOUN_TAGS = ("NN", "NNS", "NNP", "NNPS")

# Penn Treebank tags plus the punctuation tags it uses.
TAGSET = frozenset(
    "CC CD DT EX FW IN JJ JJR JJS LS MD NN NNS NNP NNPS PDT POS PRP PRP$ RB RBR RBS RP "
    "SYM TO UH VB VBD VBG VBN VBP VBZ WDT WP WP$ WRB".split()
    + [".", ",", ":", "``", "''", "-LRB-", "-RRB-", "#", "$"]
)
FALLBACK_TAG = "FW"

PAD, UNK, EOS = "<PAD>", "<UNK>", "<EOS>"
IMG_BOS, TXT_BOS = "<IMG_BOS>", "<TXT_BOS>"
POS_DICT, RELATION = "<POS_DICT>", "<RELATION>"
SPECIALS = (PAD, UNK, EOS, IMG_BOS, TXT_BOS, POS_DICT, RELATION)
DEFAULT_CAPACITY = 10

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
_PUNCT_TAGS = {".": ".", "!": ".", "?": ".", ",": ",", ":": ":", ";": ":", "-": ":",
               "'": "''", '"': "''", "(": "-LRB-", ")": "-RRB-", "$": "$", "#": "#"}


class TextPrepError(ValueError):
    pass


class TaggingFormatError(TextPrepError):
    pass


class CapacityError(TextPrepError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace, with punctuation as separate tokens."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class TaggedToken:
    surface: str
    tag: str

    def __post_init__(self):
        if not self.surface:
            raise TextPrepError("empty token")
        if self.tag not in TAGSET:
            raise TaggingFormatError(f"unknown tag {self.tag!r} for {self.surface!r}")


class Tagger(Protocol):
    def tag(self, tokens: Sequence[str]) -> list[str]: ...


def load_lexicon(path: str | Path | None = None) -> dict[str, str]:
    """Read a ``word<TAB>tag`` file; ``None`` loads the bundled lexicon."""
    if path is None:
        text = resources.files("vipg").joinpath("data/lexicon.tsv").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    lexicon = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or parts[1] not in TAGSET:
            raise TaggingFormatError(f"lexicon line {lineno}: expected word<TAB>tag, got {line!r}")
        lexicon[parts[0].lower()] = parts[1]
    return lexicon


class LexiconTagger:
    """Most-frequent-tag lookup with suffix rules for unknown words."""

    def __init__(self, lexicon: dict[str, str] | None = None):
        self.lexicon = load_lexicon() if lexicon is None else dict(lexicon)

    def _guess(self, word: str) -> str:
        if word in _PUNCT_TAGS:
            return _PUNCT_TAGS[word]
        if not any(c.isalnum() for c in word):
            return "SYM"
        if word.isdigit():
            return "CD"
        for stem in (word[:-2] if word.endswith("es") else None, word[:-1] if word.endswith("s") else None):
            if stem and self.lexicon.get(stem) == "NN":
                return "NNS"
        if word.endswith(("tion", "ness", "ment")):
            return "NN"
        return FALLBACK_TAG

    def tag(self, tokens: Sequence[str]) -> list[str]:
        return [self.lexicon.get(t) or self._guess(t) for t in tokens]


class PretaggedTagger:
    """Passes through tags supplied alongside the tokens."""

    def __init__(self, tags: Sequence[str]):
        self.tags = list(tags)

    def tag(self, tokens: Sequence[str]) -> list[str]:
        if len(tokens) != len(self.tags):
            raise TaggingFormatError(f"{len(tokens)} tokens but {len(self.tags)} tags")
        return list(self.tags)


def parse_pretagged_line(line: str) -> list[TaggedToken]:
    """Parse ``surface_TAG`` items separated by spaces."""
    out = []
    for item in line.split():
        surface, sep, tag = item.rpartition("_")
        if not sep or not surface:
            raise TaggingFormatError(f"expected surface_TAG, got {item!r}")
        out.append(TaggedToken(surface.lower(), tag))
    return out


def read_tags_sidecar(path: str | Path) -> list[list[str]]:
    """One line of space-separated tags per sentence."""
    return [line.split() for line in Path(path).read_text(encoding="utf-8").splitlines()]


def pos_tag(tokens: Sequence[str], tagger: Tagger | None = None) -> list[TaggedToken]:
    tagger = tagger or default_tagger()
    tags = tagger.tag(tokens)
    if len(tags) != len(tokens):
        raise TaggingFormatError(f"{len(tokens)} tokens but {len(tags)} tags")
    return [TaggedToken(t, g) for t, g in zip(tokens, tags)]


_DEFAULT_TAGGER: LexiconTagger | None = None


def default_tagger() -> LexiconTagger:
    global _DEFAULT_TAGGER
    if _DEFAULT_TAGGER is None:
        _DEFAULT_TAGGER = LexiconTagger()
    return _DEFAULT_TAGGER


# ---------------------------------------------------------------------------
# object / relation split
# ---------------------------------------------------------------------------


def placeholder(tag: str, index: int) -> str:
    return f"{tag}@{index}"


def is_placeholder(token: str) -> bool:
    tag, sep, idx = token.partition("@")
    return bool(sep) and tag in NOUN_TAGS and idx.isdigit()


@dataclass
class ProcessedText:
    objects: list[tuple[str, str]]
    relation: list[str]
    target: list[str]
    raw: str = ""

    def reconstruct(self) -> list[str]:
        words = dict(self.objects)
        return [words.get(t, t) for t in self.relation]

    @property
    def object_tokens(self) -> list[str]:
        return [tok for pair in self.objects for tok in pair]

    def transformed(self) -> list[str]:
        return [POS_DICT, *self.object_tokens, RELATION, *self.relation]


def split_object_relation(tagged: Sequence[TaggedToken], capacity: int = DEFAULT_CAPACITY,
                          raw: str | None = None) -> ProcessedText:
    """Replace every noun occurrence by a fresh ``TAG@index`` placeholder."""
    counters: Counter[str] = Counter()
    objects, relation = [], []
    for tok in tagged:
        if tok.tag in NOUN_TAGS:
            idx = counters[tok.tag]
            if idx >= capacity:
                sentence = raw if raw is not None else " ".join(t.surface for t in tagged)
                raise CapacityError(f"more than {capacity} {tok.tag} nouns in: {sentence!r}")
            counters[tok.tag] += 1
            ph = placeholder(tok.tag, idx)
            objects.append((ph, tok.surface))
            relation.append(ph)
        else:
            relation.append(tok.surface)
    target = [t.surface for t in tagged]
    return ProcessedText(objects, relation, target, raw if raw is not None else " ".join(target))


def process(text: str, tagger: Tagger | None = None, capacity: int = DEFAULT_CAPACITY) -> ProcessedText:
    return split_object_relation(pos_tag(tokenize(text), tagger), capacity, raw=text)


def as_original_text(p: ProcessedText) -> ProcessedText:
    """Ablation input: no objects, the relation is the untouched sentence."""
    return ProcessedText([], list(p.target), list(p.target), p.raw)


def format_table(p: ProcessedText) -> str:
    return "\n".join([
        f"Original Text: {' '.join(p.target)}",
        f"Object Sequence: {' '.join(p.object_tokens)}",
        f"Relation Sequence: {' '.join(p.relation)}",
        f"Transformed Input Text: {' '.join(p.transformed())}",
    ])


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------


@dataclass
class Vocab:
    itos: list[str]
    capacity: int = DEFAULT_CAPACITY
    stoi: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise TextPrepError("duplicate token in vocabulary")
        if tuple(self.itos[:len(SPECIALS)]) != SPECIALS:
            raise TextPrepError("special tokens must occupy the first ids")

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    pad_id = property(lambda self: self.stoi[PAD])
    unk_id = property(lambda self: self.stoi[UNK])
    eos_id = property(lambda self: self.stoi[EOS])
    img_bos_id = property(lambda self: self.stoi[IMG_BOS])
    txt_bos_id = property(lambda self: self.stoi[TXT_BOS])
    pos_dict_id = property(lambda self: self.stoi[POS_DICT])
    relation_id = property(lambda self: self.stoi[RELATION])

    def encode(self, tokens: Iterable[str]) -> list[int]:
        unk = self.unk_id
        return [self.stoi.get(t, unk) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def sha256(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps({"capacity": self.capacity, "tokens": self.itos}, indent=0),
                              encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        blob = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(blob["tokens"], blob["capacity"])


def build_vocab(corpus: Iterable[ProcessedText], min_freq: int = 1,
                capacity: int = DEFAULT_CAPACITY) -> Vocab:
    """Specials, then placeholders, then corpus words by descending frequency (ties alphabetical)."""
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    reserved = list(SPECIALS) + [placeholder(t, i) for t in NOUN_TAGS for i in range(capacity)]
    counts: Counter[str] = Counter()
    for p in corpus:
        counts.update(p.target)
    taken = set(reserved)
    words = sorted((w for w, c in counts.items() if c >= min_freq and w not in taken),
                   key=lambda w: (-counts[w], w))
    return Vocab(reserved + words, capacity)


def to_model_input(p: ProcessedText, vocab: Vocab) -> tuple[list[int], list[int], list[int]]:
    object_ids = [vocab.pos_dict_id] + vocab.encode(p.object_tokens)
    relation_ids = [vocab.relation_id] + vocab.encode(p.relation)
    target_ids = vocab.encode(p.target) + [vocab.eos_id]
    return object_ids, relation_ids, target_ids


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)
