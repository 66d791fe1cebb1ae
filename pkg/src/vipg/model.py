"""Joint image-caption / paraphrase network.

One encoder reads ``[image; objects; relation]`` under a segment-restricted
attention mask. One decoder, selected by its begin-of-sequence token,
generates the caption from ``[image; objects]`` or the paraphrase from
``[objects; relation]``. Output distributions mix a vocabulary softmax with a
copy distribution over object words through a scalar gate per step.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import numerics as nx
from . import textprep as tp
from .dataio import Batch, ImageFeature
from .numerics import Tensor

PAD_ID = tp.SPECIALS.index(tp.PAD)
UNK_ID = tp.SPECIALS.index(tp.UNK)
EOS_ID = tp.SPECIALS.index(tp.EOS)
IMG_BOS_ID = tp.SPECIALS.index(tp.IMG_BOS)
TXT_BOS_ID = tp.SPECIALS.index(tp.TXT_BOS)

COPY_SCOPES = ("objects", "sentence", "none")
INIT_STD = 0.02

# segment codes in the encoder sequence
SEG_I, SEG_O, SEG_R = 0, 1, 2
# ATTEND[query segment, key segment]
ATTEND = np.array([
    [True, True, False],    # image    -> image, objects
    [False, True, False],   # objects  -> objects
    [False, True, True],    # relation -> objects, relation
])


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    d_ff: int = 256
    d_img: int = 32
    max_len: int = 64
    copy_mask_prob: float = 0.2
    lambda_kl: float = 1.0
    dropout: float = 0.0
    copy_scope: str = "objects"
    # also replace masked object words by UNK in the encoder input
    mask_encoder_objects: bool = False

    def problems(self) -> list[str]:
        out = []
        if self.vocab_size <= len(tp.SPECIALS):
            out.append(f"vocab_size must exceed {len(tp.SPECIALS)}")
        for name in ("d_model", "heads", "d_ff", "d_img", "max_len"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1")
        if self.heads >= 1 and self.d_model % self.heads:
            out.append("d_model must be divisible by heads")
        if self.enc_layers < 0 or self.dec_layers < 0:
            out.append("layer counts must be >= 0")
        if not 0 <= self.copy_mask_prob < 1:
            out.append("copy_mask_prob must be in [0, 1)")
        if self.lambda_kl < 0:
            out.append("lambda_kl must be >= 0")
        if not 0 <= self.dropout < 1:
            out.append("dropout must be in [0, 1)")
        if self.copy_scope not in COPY_SCOPES:
            out.append(f"copy_scope must be one of {COPY_SCOPES}")
        return out

    def validate(self) -> "ModelConfig":
        errs = self.problems()
        if errs:
            raise ModelError("invalid model config: " + "; ".join(errs))
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ModelError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape of every learnable tensor; a pure function of the config."""
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (v, d), "v_I": (d,), "v_O": (d,), "v_R": (d,), "P_img": (cfg.d_img, d),
    }

    def attn(prefix):
        for m in ("q", "k", "v", "o"):
            shapes[f"{prefix}.w{m}"] = (d, d)
            shapes[f"{prefix}.b{m}"] = (d,)

    def ln(prefix):
        shapes[f"{prefix}.g"] = (d,)
        shapes[f"{prefix}.b"] = (d,)

    def ffn(prefix):
        shapes.update({f"{prefix}.w1": (d, f), f"{prefix}.b1": (f,), f"{prefix}.w2": (f, d), f"{prefix}.b2": (d,)})

    for i in range(cfg.enc_layers):
        attn(f"enc.{i}.attn"), ln(f"enc.{i}.ln1"), ffn(f"enc.{i}.ff"), ln(f"enc.{i}.ln2")
    for i in range(cfg.dec_layers):
        attn(f"dec.{i}.self"), ln(f"dec.{i}.ln1"), attn(f"dec.{i}.cross"), ln(f"dec.{i}.ln2")
        ffn(f"dec.{i}.ff"), ln(f"dec.{i}.ln3")
    shapes.update({"W_o": (d, v), "b_o": (v,), "w_g": (d, 1), "b_g": (1,)})
    return shapes


def parameter_count(cfg: ModelConfig) -> int:
    return sum(math.prod(s) for s in parameter_shapes(cfg).values())


def init_parameters(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith(".g"):
            data = np.ones(shape)
        elif len(shape) == 1 or leaf.startswith("b"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, INIT_STD, size=shape)
            if name == "P_img" and cfg.d_img == cfg.d_model:
                data = data + np.eye(cfg.d_model)
        params[name] = nx.parameter(data, name=name)
    return params


def positional_encoding(positions: np.ndarray, d: int) -> np.ndarray:
    """Sinusoidal encoding: sin on even columns, cos on odd columns."""
    positions = np.asarray(positions, dtype=np.float64)
    i = np.arange(d)
    rates = 1.0 / np.power(10000.0, (2 * (i // 2)) / d)
    angles = positions[..., None] * rates
    return np.where(i % 2 == 0, np.sin(angles), np.cos(angles))


def build_partial_mask(l_I: int, l_O: int, l_R: int) -> np.ndarray:
    """0/1 mask over ``[I; O; R]``: I sees I and O, O sees O, R sees O and R."""
    if l_O + l_R < 1:
        raise ModelError("partial mask needs at least one text position")
    seg = np.array([SEG_I] * l_I + [SEG_O] * l_O + [SEG_R] * l_R, dtype=np.int64)
    return ATTEND[seg[:, None], seg[None, :]].astype(np.int8)


def batch_partial_mask(widths: Sequence[int], lengths: Sequence[np.ndarray]) -> np.ndarray:
    """Boolean (B, T, T) mask for right-padded segments ``[I; O; R]``.

    Padded keys are never attended. Padded query rows attend only
    themselves so that no row is empty; their outputs are ignored.
    """
    seg = np.concatenate([np.full(w, s) for s, w in zip((SEG_I, SEG_O, SEG_R), widths)]).astype(np.int64)
    valid = np.concatenate([np.arange(w)[None, :] < np.asarray(n)[:, None]
                            for w, n in zip(widths, lengths)], axis=1)
    mask = ATTEND[seg[:, None], seg[None, :]][None] & valid[:, None, :] & valid[:, :, None]
    t = len(seg)
    diag = np.arange(t)
    mask[:, diag, diag] |= ~valid
    return mask


def sample_copy_mask(shape, p: float, rng: np.random.Generator | None, training: bool = True) -> np.ndarray:
    """i.i.d. Bernoulli(p) per copy slot during training; all False otherwise."""
    if not 0 <= p < 1:
        raise ModelError("copy mask probability must be in [0, 1)")
    if not training or p == 0 or rng is None:
        return np.zeros(shape, dtype=bool)
    return rng.random(shape) < p


@dataclass
class EncoderOutput:
    I: Tensor
    O: Tensor
    R: Tensor


@dataclass
class DecoderDistribution:
    probs: Tensor
    gen: Tensor
    copy: Tensor | None
    gate: Tensor | None


@dataclass
class CopySource:
    """Copy keys and where their probability mass lands in the vocabulary."""
    keys: Tensor            # (B, L, d)
    vocab_ids: np.ndarray   # (B, L)
    valid: np.ndarray       # (B, L) bool


@dataclass
class TrainForward:
    P_I: Tensor
    P_S: Tensor
    dist_I: DecoderDistribution
    dist_S: DecoderDistribution
    copy_mask: np.ndarray


def _lengths_mask(width: int, lengths) -> np.ndarray:
    return np.arange(width)[None, :] < np.asarray(lengths)[:, None]


def shift_right(target_ids: np.ndarray, bos_id: int) -> np.ndarray:
    target_ids = np.asarray(target_ids)
    out = np.empty_like(target_ids)
    out[:, 0] = bos_id
    out[:, 1:] = target_ids[:, :-1]
    return out


class ParaphraseModel:
    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.cfg = cfg.validate()
        self.params = params if params is not None else init_parameters(cfg, seed)
        expected = parameter_shapes(cfg)
        got = {k: v.shape for k, v in self.params.items()}
        if got != expected:
            missing = sorted(set(expected) - set(got))
            extra = sorted(set(got) - set(expected))
            wrong = sorted(k for k in set(got) & set(expected) if got[k] != expected[k])
            raise ModelError(f"parameter mismatch: missing {missing}, unexpected {extra}, bad shape {wrong}")

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    # -- building blocks -------------------------------------------------

    def _linear(self, x: Tensor, w: str, b: str) -> Tensor:
        return nx.matmul(x, self.params[w]) + self.params[b]

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return nx.layer_norm(x, self.params[prefix + ".g"], self.params[prefix + ".b"])

    def _mha(self, prefix: str, xq: Tensor, xkv: Tensor, mask: np.ndarray, rng) -> Tensor:
        q = self._linear(xq, prefix + ".wq", prefix + ".bq")
        k = self._linear(xkv, prefix + ".wk", prefix + ".bk")
        v = self._linear(xkv, prefix + ".wv", prefix + ".bv")
        a = nx.attention(q, k, v, mask, self.cfg.heads, self.cfg.dropout, rng)
        return self._linear(a, prefix + ".wo", prefix + ".bo")

    def _ffn(self, x: Tensor, prefix: str, rng) -> Tensor:
        h = nx.relu(self._linear(x, prefix + ".w1", prefix + ".b1"))
        return self._linear(nx.dropout(h, self.cfg.dropout, rng), prefix + ".w2", prefix + ".b2")

    def _drop(self, x: Tensor, rng) -> Tensor:
        return nx.dropout(x, self.cfg.dropout, rng)

    def _tokens(self, ids: np.ndarray) -> Tensor:
        return nx.embedding(self.params["tok_emb"], ids) * math.sqrt(self.cfg.d_model)

    # -- embeddings --------------------------------------------------------

    def embed_image(self, features) -> Tensor:
        """Project precomputed patch features to model width and add the image tag."""
        arr = features.patches if isinstance(features, ImageFeature) else np.asarray(features)
        if arr.shape[-1] != self.cfg.d_img:
            raise ModelError(f"feature width {arr.shape[-1]} does not match d_img={self.cfg.d_img}")
        return nx.matmul(Tensor(arr), self.params["P_img"]) + self.params["v_I"]

    def embed_text(self, object_ids, relation_ids, obj_len=None) -> tuple[Tensor, Tensor]:
        """Token embeddings plus segment tags, positions running over ``[O; R]``.

        Accepts single sequences (1-D) or right-padded batches with ``obj_len``.
        """
        obj = np.asarray(object_ids, dtype=np.int64)
        rel = np.asarray(relation_ids, dtype=np.int64)
        single = obj.ndim == 1
        if single:
            obj, rel = obj[None], rel[None]
            obj_len = [obj.shape[1]]
        obj_len = np.asarray(obj_len if obj_len is not None else [obj.shape[1]] * len(obj))
        d = self.cfg.d_model
        pos_o = np.broadcast_to(np.arange(obj.shape[1]), obj.shape)
        pos_r = obj_len[:, None] + np.arange(rel.shape[1])[None, :]
        e_o = self._tokens(obj) + self.params["v_O"] + Tensor(positional_encoding(pos_o, d))
        e_r = self._tokens(rel) + self.params["v_R"] + Tensor(positional_encoding(pos_r, d))
        if single:
            e_o, e_r = nx.reshape(e_o, e_o.shape[1:]), nx.reshape(e_r, e_r.shape[1:])
        return e_o, e_r

    # -- encoder -----------------------------------------------------------

    def encode(self, e_I: Tensor | None, e_O: Tensor, e_R: Tensor, lengths=None, rng=None) -> EncoderOutput:
        """Run the shared encoder over ``[I; O; R]`` and split the result.

        ``lengths`` = (feat_len, obj_len, rel_len) for padded batches; 2-D
        inputs are treated as a single unpadded example.
        """
        single = e_O.ndim == 2
        if single:
            e_O, e_R = nx.reshape(e_O, (1,) + e_O.shape), nx.reshape(e_R, (1,) + e_R.shape)
            if e_I is not None:
                e_I = nx.reshape(e_I, (1,) + e_I.shape)
        bsz = e_O.shape[0]
        l_I = 0 if e_I is None else e_I.shape[1]
        l_O, l_R = e_O.shape[1], e_R.shape[1]
        if lengths is None:
            lengths = ([l_I] * bsz, [l_O] * bsz, [l_R] * bsz)
        mask = batch_partial_mask((l_I, l_O, l_R), lengths)
        x = nx.concat([e_O, e_R] if e_I is None else [e_I, e_O, e_R], axis=1)
        for i in range(self.cfg.enc_layers):
            p = f"enc.{i}"
            x = self._ln(x + self._drop(self._mha(p + ".attn", x, x, mask, rng), rng), p + ".ln1")
            x = self._ln(x + self._drop(self._ffn(x, p + ".ff", rng), rng), p + ".ln2")
        if e_I is None:
            I = Tensor(np.zeros((bsz, 0, self.cfg.d_model)))
        else:
            I = nx.narrow(x, 0, l_I)
        O = nx.narrow(x, l_I, l_I + l_O)
        R = nx.narrow(x, l_I + l_O, l_I + l_O + l_R)
        if single:
            I, O, R = (nx.reshape(t, t.shape[1:]) for t in (I, O, R))
        return EncoderOutput(I, O, R)

    # -- decoder -----------------------------------------------------------

    def decode(self, memory: Tensor, mem_valid: np.ndarray, target_in: np.ndarray,
               copy: CopySource | None, copy_mask: np.ndarray | None = None, rng=None) -> DecoderDistribution:
        """Teacher-forced decoder pass; ``target_in`` starts with the routing BOS token.

        Copy mass of slots flagged in ``copy_mask`` is routed to UNK. Rows
        with no copy source get a gate of exactly 0.
        """
        target_in = np.asarray(target_in, dtype=np.int64)
        bsz, n = target_in.shape
        d = self.cfg.d_model
        y = self._tokens(target_in) + Tensor(positional_encoding(np.arange(n), d))
        y = self._drop(y, rng)
        causal = np.tril(np.ones((n, n), dtype=bool))[None]
        cross = np.broadcast_to(np.asarray(mem_valid, dtype=bool)[:, None, :], (bsz, n, memory.shape[1]))
        for i in range(self.cfg.dec_layers):
            p = f"dec.{i}"
            y = self._ln(y + self._drop(self._mha(p + ".self", y, y, causal, rng), rng), p + ".ln1")
            y = self._ln(y + self._drop(self._mha(p + ".cross", y, memory, cross, rng), rng), p + ".ln2")
            y = self._ln(y + self._drop(self._ffn(y, p + ".ff", rng), rng), p + ".ln3")
        gen = nx.softmax_rows(self._linear(y, "W_o", "b_o"))
        if copy is None or self.cfg.copy_scope == "none":
            return DecoderDistribution(gen, gen, None, None)

        valid = np.asarray(copy.valid, dtype=bool)
        has_copy = valid.any(axis=1)
        slot_ok = valid.copy()
        slot_ok[~has_copy, 0] = True  # placeholder slot, gated off below
        scores = nx.matmul(y, nx.transpose(copy.keys))
        copy_p = nx.softmax_rows(scores, np.broadcast_to(slot_ok[:, None, :], scores.shape))
        dest = np.where(copy_mask, UNK_ID, copy.vocab_ids) if copy_mask is not None else copy.vocab_ids
        onehot = np.zeros((bsz, valid.shape[1], self.cfg.vocab_size))
        b_idx, s_idx = np.nonzero(valid)
        onehot[b_idx, s_idx, np.asarray(dest)[b_idx, s_idx]] = 1.0
        scattered = nx.matmul(copy_p, Tensor(onehot))
        gate = nx.sigmoid(self._linear(y, "w_g", "b_g")) * Tensor(has_copy[:, None, None].astype(float))
        probs = gate * scattered + (1.0 - gate) * gen
        return DecoderDistribution(probs, gen, copy_p, gate)

    # -- full passes ---------------------------------------------------------

    def copy_source(self, enc: EncoderOutput, batch: Batch) -> CopySource | None:
        scope = self.cfg.copy_scope
        if scope == "objects":
            return CopySource(nx.gather_rows(enc.O, batch.copy_pos), batch.copy_ids,
                              _lengths_mask(batch.copy_pos.shape[1], batch.copy_len))
        if scope == "sentence":
            text = nx.concat([enc.O, enc.R], axis=1)
            return CopySource(nx.gather_rows(text, batch.sent_pos), batch.sent_ids,
                              _lengths_mask(batch.sent_pos.shape[1], batch.sent_len))
        return None

    def copy_slots(self, batch: Batch) -> tuple[int, int]:
        if self.cfg.copy_scope == "sentence":
            return batch.sent_pos.shape
        return batch.copy_pos.shape

    def encode_batch(self, batch: Batch, object_ids: np.ndarray | None = None,
                     with_images: bool = True, rng=None) -> EncoderOutput:
        obj = batch.object_ids if object_ids is None else object_ids
        e_O, e_R = self.embed_text(obj, batch.relation_ids, batch.obj_len)
        if with_images:
            e_I = self.embed_image(batch.features)
            lengths = (batch.feat_len, batch.obj_len, batch.rel_len)
        else:
            e_I = None
            lengths = ([0] * len(batch), batch.obj_len, batch.rel_len)
        return self.encode(e_I, e_O, e_R, lengths, rng)

    def memories(self, enc: EncoderOutput, batch: Batch, with_images: bool = True):
        """``[I; O]`` for captioning and ``[O; R]`` for paraphrasing, with key masks."""
        o_valid = _lengths_mask(enc.O.shape[1], batch.obj_len)
        r_valid = _lengths_mask(enc.R.shape[1], batch.rel_len)
        mem_S = (nx.concat([enc.O, enc.R], axis=1), np.concatenate([o_valid, r_valid], axis=1))
        if not with_images:
            return None, mem_S
        i_valid = _lengths_mask(enc.I.shape[1], batch.feat_len)
        mem_I = (nx.concat([enc.I, enc.O], axis=1), np.concatenate([i_valid, o_valid], axis=1))
        return mem_I, mem_S

    def forward_train(self, batch: Batch, rng: np.random.Generator | None,
                      copy_mask: np.ndarray | None = None, training: bool = True) -> TrainForward:
        """Encode once, decode twice on the same target with one shared copy mask."""
        if not batch.has_images:
            raise ModelError("training forward needs image features")
        if copy_mask is None:
            slots = self.copy_slots(batch)
            copy_mask = sample_copy_mask(slots, self.cfg.copy_mask_prob, rng, training)
        obj = batch.object_ids
        if self.cfg.mask_encoder_objects and self.cfg.copy_scope == "objects" and copy_mask.any():
            obj = obj.copy()
            valid = _lengths_mask(batch.copy_pos.shape[1], batch.copy_len) & copy_mask
            b_idx, s_idx = np.nonzero(valid)
            obj[b_idx, batch.copy_pos[b_idx, s_idx]] = UNK_ID
        drop_rng = rng if training else None
        enc = self.encode_batch(batch, obj, rng=drop_rng)
        copy = self.copy_source(enc, batch)
        (mem_I, valid_I), (mem_S, valid_S) = self.memories(enc, batch)
        dist_I = self.decode(mem_I, valid_I, shift_right(batch.target_ids, IMG_BOS_ID), copy, copy_mask, drop_rng)
        dist_S = self.decode(mem_S, valid_S, shift_right(batch.target_ids, TXT_BOS_ID), copy, copy_mask, drop_rng)
        return TrainForward(dist_I.probs, dist_S.probs, dist_I, dist_S, copy_mask)
