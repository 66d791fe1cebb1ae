"""Manifests, image-feature files, synthetic data and padded batches."""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import textprep as tp

FEATURE_MAGIC = b"VIPG"
_HEADER = struct.Struct("<II")


class DataError(ValueError):
    pass


class ManifestError(DataError):
    pass


class FeatureFormatError(DataError):
    pass


class MagicError(FeatureFormatError):
    pass


class TruncationError(FeatureFormatError):
    pass


class NonFiniteFeatureError(FeatureFormatError):
    pass


class SequenceTooLongError(DataError):
    pass


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CaptionRecord:
    id: str
    caption: str
    feature_path: str


def load_manifest(path: str | Path) -> list[CaptionRecord]:
    """One JSON object per line with keys ``id``, ``caption``, ``feature``."""
    records, seen = [], {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rec = CaptionRecord(str(obj["id"]), str(obj["caption"]), str(obj["feature"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ManifestError(f"{path}: malformed record on line {lineno}: {exc}") from None
            if rec.id in seen:
                raise ManifestError(f"{path}: duplicate id {rec.id!r} on line {lineno} "
                                    f"(first seen on line {seen[rec.id]})")
            seen[rec.id] = lineno
            records.append(rec)
    return records


def write_manifest(records: Iterable[CaptionRecord], path: str | Path):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({"id": r.id, "caption": r.caption, "feature": r.feature_path},
                                ensure_ascii=False) + "\n")


def select_captions(records: Sequence[CaptionRecord], mode: str = "all", seed: int = 0) -> list[CaptionRecord]:
    """``one`` keeps a single seeded-random caption per image, ``all`` keeps every caption."""
    if mode == "all":
        return list(records)
    if mode != "one":
        raise ValueError(f"captions mode must be 'one' or 'all', got {mode!r}")
    groups: dict[str, list[CaptionRecord]] = {}
    for r in records:
        groups.setdefault(r.feature_path, []).append(r)
    rng = np.random.default_rng(seed)
    picked = {id(group[rng.integers(len(group))]) for group in groups.values()}
    return [r for r in records if id(r) in picked]


# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ImageFeature:
    patches: np.ndarray

    def __post_init__(self):
        arr = np.array(self.patches, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise FeatureFormatError(f"feature matrix must be l x d with l >= 1, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteFeatureError("feature matrix contains non-finite values")
        arr.flags.writeable = False
        object.__setattr__(self, "patches", arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.patches.shape


def save_feature(feature: ImageFeature | np.ndarray, path: str | Path):
    arr = feature.patches if isinstance(feature, ImageFeature) else ImageFeature(feature).patches
    l, d = arr.shape
    Path(path).write_bytes(FEATURE_MAGIC + _HEADER.pack(l, d) + arr.astype("<f4").tobytes())


def load_feature(path: str | Path) -> ImageFeature:
    blob = Path(path).read_bytes()
    if blob[:4] != FEATURE_MAGIC:
        raise MagicError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 4 + _HEADER.size:
        raise TruncationError(f"{path}: truncated header")
    l, d = _HEADER.unpack_from(blob, 4)
    payload = blob[4 + _HEADER.size:]
    need = 4 * l * d
    if len(payload) < need:
        raise TruncationError(f"{path}: payload has {len(payload)} bytes, expected {need}")
    if len(payload) > need:
        raise FeatureFormatError(f"{path}: {len(payload) - need} trailing bytes")
    arr = np.frombuffer(payload, dtype="<f4").reshape(l, d)
    if not np.isfinite(arr).all():
        raise NonFiniteFeatureError(f"{path}: non-finite values")
    return ImageFeature(arr)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SynthSpec:
    nouns: list[str] = field(default_factory=lambda: [
        "dog", "cat", "man", "woman", "horse", "bird", "ball", "table", "tree", "car", "boat", "child",
        "bench", "kite", "bus", "girl", "boy", "truck", "chair", "bike", "cow", "sheep", "plane", "train"])
    verbs: list[str] = field(default_factory=lambda: [
        "sits", "runs", "stands", "walks", "jumps", "plays", "waits", "sleeps"])
    adjectives: list[str] = field(default_factory=lambda: [
        "red", "blue", "small", "large", "young", "old", "happy", "brown", "white", "black"])
    preps: list[str] = field(default_factory=lambda: ["on", "near", "under", "behind", "beside", "by"])
    determiners: list[str] = field(default_factory=lambda: ["a", "the"])
    sigma: float = 0.1
    d_img: int = 32
    l: int = 4

    # determiner adjective noun verb prep determiner noun .
    TEMPLATE = ("det", "adj", "noun", "verb", "prep", "det", "noun", ".")

    @classmethod
    def from_json(cls, path: str | Path) -> "SynthSpec":
        blob = json.loads(Path(path).read_text(encoding="utf-8"))
        unknown = set(blob) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise DataError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**blob)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)


@dataclass
class SynthOutput:
    manifest: Path
    feature_paths: list[Path]
    projection: np.ndarray


def synth_caption_and_bag(spec: SynthSpec, rng: np.random.Generator) -> tuple[str, np.ndarray]:
    pools = {"det": spec.determiners, "adj": spec.adjectives, "noun": spec.nouns,
             "verb": spec.verbs, "prep": spec.preps}
    words, bag = [], np.zeros(len(spec.nouns))
    for slot in SynthSpec.TEMPLATE:
        if slot == ".":
            words.append(".")
            continue
        k = int(rng.integers(len(pools[slot])))
        words.append(pools[slot][k])
        if slot == "noun":
            bag[k] += 1
    return " ".join(words), bag


def synth_feature(bag: np.ndarray, projection: np.ndarray, spec: SynthSpec,
                  rng: np.random.Generator | None) -> np.ndarray:
    feat = (bag @ projection).reshape(spec.l, spec.d_img)
    if spec.sigma > 0:
        feat = feat + spec.sigma * rng.standard_normal(feat.shape)
    return feat.astype(np.float32)


def synth_generate(n: int, seed: int, spec: SynthSpec | None, out_dir: str | Path,
                   prefix: str = "synth") -> SynthOutput:
    """Write ``n`` caption/feature pairs plus the noun projection under ``out_dir``.

    Features are a fixed Gaussian projection of the caption's noun counts
    plus seeded noise, so the output is a pure function of (n, seed, spec).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    spec = spec or SynthSpec()
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    projection = rng.standard_normal((len(spec.nouns), spec.l * spec.d_img))
    records, paths = [], []
    for i in range(n):
        caption, bag = synth_caption_and_bag(spec, rng)
        rid = f"{prefix}-{i:05d}"
        rel = f"features/{rid}.vipg"
        save_feature(synth_feature(bag, projection, spec, rng), out / rel)
        records.append(CaptionRecord(rid, caption, rel))
        paths.append(out / rel)
    save_feature(projection.reshape(len(spec.nouns), -1).astype(np.float32), out / "projection.vipg")
    (out / "synth_spec.json").write_text(spec.to_json(), encoding="utf-8")
    write_manifest(records, out / "manifest.jsonl")
    return SynthOutput(out / "manifest.jsonl", paths, projection)


# ---------------------------------------------------------------------------
# encoded examples and batches
# ---------------------------------------------------------------------------


@dataclass
class EncodedExample:
    id: str
    object_ids: list[int]
    relation_ids: list[int]
    target_ids: list[int]
    # object-sequence positions of the object words and their vocab ids
    copy_pos: list[int]
    copy_ids: list[int]
    # for every target token (no EOS): segment (0 objects, 1 relation) and index in it
    sent_seg: list[int]
    sent_idx: list[int]
    feature_path: str | None = None
    feature: np.ndarray | None = None


def encode_example(rid: str, p: tp.ProcessedText, vocab: tp.Vocab,
                   feature_path: str | None = None) -> EncodedExample:
    object_ids, relation_ids, target_ids = tp.to_model_input(p, vocab)
    copy_pos = [2 + 2 * k for k in range(len(p.objects))]
    copy_ids = [object_ids[i] for i in copy_pos]
    word_pos = {ph: 2 + 2 * k for k, (ph, _) in enumerate(p.objects)}
    sent_seg, sent_idx = [], []
    for j, tok in enumerate(p.relation):
        if tok in word_pos:
            sent_seg.append(0)
            sent_idx.append(word_pos[tok])
        else:
            sent_seg.append(1)
            sent_idx.append(1 + j)
    return EncodedExample(rid, object_ids, relation_ids, target_ids, copy_pos, copy_ids,
                          sent_seg, sent_idx, feature_path)


def attach_features(examples: Sequence[EncodedExample], root: str | Path, threads: int = 1):
    """Load every example's feature file; a missing file names its record.

    Distinct files are read on up to ``threads`` worker threads; results
    are assigned in example order, so the outcome does not depend on it.
    """
    root = Path(root)
    first: dict[str, str] = {}
    for ex in examples:
        if ex.feature_path is None:
            raise DataError(f"record {ex.id!r} has no feature path")
        first.setdefault(ex.feature_path, ex.id)

    def load(rel: str) -> np.ndarray:
        path = root / rel
        if not path.exists():
            raise DataError(f"record {first[rel]!r}: feature file {path} not found")
        return load_feature(path).patches

    paths = list(first)
    if threads > 1 and len(paths) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            loaded = list(pool.map(load, paths))
    else:
        loaded = [load(rel) for rel in paths]
    cache = dict(zip(paths, loaded))
    for ex in examples:
        ex.feature = cache[ex.feature_path]


@dataclass
class Batch:
    ids: list[str]
    object_ids: np.ndarray
    obj_len: np.ndarray
    relation_ids: np.ndarray
    rel_len: np.ndarray
    target_ids: np.ndarray
    tgt_len: np.ndarray
    copy_pos: np.ndarray
    copy_ids: np.ndarray
    copy_len: np.ndarray
    # positions into the padded [objects; relation] text segment
    sent_pos: np.ndarray
    sent_ids: np.ndarray
    sent_len: np.ndarray
    features: np.ndarray | None = None
    feat_len: np.ndarray | None = None

    def __len__(self):
        return len(self.ids)

    @property
    def has_images(self) -> bool:
        return self.features is not None


def _pad(rows: Sequence[Sequence[int]], pad: int, extra: int = 0) -> tuple[np.ndarray, np.ndarray]:
    lens = np.array([len(r) for r in rows], dtype=np.int64)
    width = max(int(lens.max(initial=0)) + extra, 1)
    out = np.full((len(rows), width), pad, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out, lens


def collate(examples: Sequence[EncodedExample], pad_id: int = 0, with_images: bool = True,
            extra_pad: int = 0) -> Batch:
    """Right-pad a list of examples; ``extra_pad`` widens every axis (testing aid)."""
    obj, obj_len = _pad([e.object_ids for e in examples], pad_id, extra_pad)
    rel, rel_len = _pad([e.relation_ids for e in examples], pad_id, extra_pad)
    tgt, tgt_len = _pad([e.target_ids for e in examples], pad_id, extra_pad)
    copy_pos, copy_len = _pad([e.copy_pos for e in examples], 0, extra_pad)
    copy_ids, _ = _pad([e.copy_ids for e in examples], pad_id, extra_pad)
    lo = obj.shape[1]
    sent_rows = [[i if s == 0 else lo + i for s, i in zip(e.sent_seg, e.sent_idx)] for e in examples]
    sent_pos, sent_len = _pad(sent_rows, 0, extra_pad)
    sent_ids, _ = _pad([e.target_ids[:-1] for e in examples], pad_id, extra_pad)
    features = feat_len = None
    if with_images:
        missing = [e.id for e in examples if e.feature is None]
        if missing:
            raise DataError(f"features not loaded for records {missing[:5]}")
        feat_len = np.array([e.feature.shape[0] for e in examples], dtype=np.int64)
        d_img = examples[0].feature.shape[1]
        features = np.zeros((len(examples), int(feat_len.max()) + extra_pad, d_img), dtype=np.float32)
        for i, e in enumerate(examples):
            if e.feature.shape[1] != d_img:
                raise DataError(f"record {e.id!r}: feature width {e.feature.shape[1]} != {d_img}")
            features[i, :len(e.feature)] = e.feature
    return Batch([e.id for e in examples], obj, obj_len, rel, rel_len, tgt, tgt_len,
                 copy_pos, copy_ids, copy_len, sent_pos, sent_ids, sent_len, features, feat_len)


def check_lengths(examples: Iterable[EncodedExample], max_len: int):
    for e in examples:
        longest = max(len(e.object_ids), len(e.relation_ids), len(e.target_ids))
        if longest > max_len:
            raise SequenceTooLongError(f"record {e.id!r}: sequence of length {longest} exceeds max_len {max_len}")


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def make_batches(examples: Sequence[EncodedExample], batch_size: int, seed: int, epoch: int = 0,
                 with_images: bool = True, shuffle: bool = True, max_len: int | None = None,
                 pad_id: int = 0) -> list[Batch]:
    """Seeded per-epoch shuffle, then right-padded batches of ``batch_size``.

    With ``with_images=False`` the batches carry no feature tensor; only the
    paraphrase route can consume them.
    """
    if max_len is not None:
        check_lengths(examples, max_len)
    order = epoch_order(len(examples), seed, epoch) if shuffle else np.arange(len(examples))
    return [collate([examples[i] for i in order[s:s + batch_size]], pad_id, with_images)
            for s in range(0, len(examples), batch_size)]
