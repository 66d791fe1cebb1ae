"""Beam-search decoding for the image-free paraphrase route and the caption route."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from . import textprep as tp
from .dataio import ImageFeature, collate, encode_example
from .model import IMG_BOS_ID, TXT_BOS_ID, CopySource, ParaphraseModel
from .numerics import Tensor

DEFAULT_BEAM = 5
DEFAULT_ALPHA = 0.7


class InferenceError(ValueError):
    pass


@dataclass
class Hypothesis:
    tokens: list[int] = field(default_factory=list)  # emitted ids, BOS excluded, EOS included
    logprob: float = 0.0
    finished: bool = False

    def score(self, alpha: float) -> float:
        return self.logprob / max(len(self.tokens), 1) ** alpha


def rank_key(alpha: float):
    return lambda h: (-h.score(alpha), len(h.tokens), h.tokens)


StepFn = Callable[[list[list[int]]], np.ndarray]


def beam_search(step_fn: StepFn, bos_id: int, eos_id: int, beam: int = DEFAULT_BEAM,
                max_len: int = 32, alpha: float = DEFAULT_ALPHA) -> list[Hypothesis]:
    """Standard beam search; returns finished hypotheses best first.

    ``step_fn`` maps a list of prefixes (each starting with ``bos_id``) to a
    (len(prefixes), V) array of next-token log-probabilities. At every step
    the ``beam`` best expansions are kept; those ending in EOS move to the
    finished pool. Survivors at ``max_len`` tokens are finished as they are.
    """
    if beam < 1 or max_len < 1:
        raise InferenceError("beam and max_len must be >= 1")
    alive = [Hypothesis()]
    finished: list[Hypothesis] = []
    for t in range(max_len):
        lp = np.asarray(step_fn([[bos_id] + h.tokens for h in alive]), dtype=np.float64)
        if lp.shape[0] != len(alive):
            raise InferenceError("step_fn returned the wrong number of rows")
        rows, cols = np.divmod(np.arange(lp.size), lp.shape[1])
        totals = np.array([alive[r].logprob for r in rows]) + lp.ravel()
        # best first; ties broken by parent rank, then token id
        order = np.lexsort((cols, rows, -totals))[:beam]
        survivors = []
        for i in order:
            h = Hypothesis(alive[rows[i]].tokens + [int(cols[i])], float(totals[i]))
            if cols[i] == eos_id or t == max_len - 1:
                h.finished = True
                finished.append(h)
            else:
                survivors.append(h)
        alive = survivors
        if not alive:
            break
    return sorted(finished, key=rank_key(alpha))


def _strip(tokens: Sequence[int], eos_id: int) -> list[int]:
    return list(tokens[:-1]) if tokens and tokens[-1] == eos_id else list(tokens)


class Paraphraser:
    """Frozen model plus vocabulary; safe to share between threads."""

    def __init__(self, model: ParaphraseModel, vocab: tp.Vocab, tagger: tp.Tagger | None = None,
                 original_text: bool = False):
        if len(vocab) != model.cfg.vocab_size:
            raise InferenceError(f"vocabulary has {len(vocab)} tokens, model expects {model.cfg.vocab_size}")
        self.model = model
        self.vocab = vocab
        self.tagger = tagger
        self.original_text = original_text

    def _prepare(self, sentence: str):
        p = tp.process(sentence, self.tagger)
        if self.original_text:
            p = tp.as_original_text(p)
        ex = encode_example("input", p, self.vocab)
        longest = max(len(ex.object_ids), len(ex.relation_ids))
        if longest > self.model.cfg.max_len:
            raise InferenceError(f"input of length {longest} exceeds max_len {self.model.cfg.max_len}")
        return p, ex

    def _step_fn(self, memory: Tensor, mem_valid: np.ndarray, copy: CopySource | None) -> StepFn:
        model = self.model

        def step(prefixes):
            k = len(prefixes)
            ids = np.array(prefixes, dtype=np.int64)
            mem = Tensor(np.repeat(memory.data, k, axis=0))
            valid = np.repeat(mem_valid, k, axis=0)
            cp = None
            if copy is not None:
                cp = CopySource(Tensor(np.repeat(copy.keys.data, k, axis=0)),
                                np.repeat(copy.vocab_ids, k, axis=0), np.repeat(copy.valid, k, axis=0))
            dist = model.decode(mem, valid, ids, cp, None, None)
            last = dist.probs.data[:, -1, :].astype(np.float64)
            return np.log(np.maximum(last, 1e-30))

        return step

    def paraphrase_ids(self, sentence: str, beam: int = DEFAULT_BEAM, max_len: int | None = None,
                       alpha: float = DEFAULT_ALPHA) -> list[int]:
        if not tp.tokenize(sentence):
            return []
        p, ex = self._prepare(sentence)
        if max_len is None:
            max_len = int(1.5 * len(p.target)) + 5
        with nx.no_grad():
            batch = collate([ex], self.vocab.pad_id, with_images=False)
            enc = self.model.encode_batch(batch, with_images=False)
            _, (mem, valid) = self.model.memories(enc, batch, with_images=False)
            copy = self.model.copy_source(enc, batch)
            hyps = beam_search(self._step_fn(mem, valid, copy), TXT_BOS_ID, self.vocab.eos_id,
                               beam, max_len, alpha)
        return _strip(hyps[0].tokens, self.vocab.eos_id)

    def paraphrase(self, sentence: str, beam: int = DEFAULT_BEAM, max_len: int | None = None,
                   alpha: float = DEFAULT_ALPHA) -> str:
        return tp.detokenize(self.vocab.decode(self.paraphrase_ids(sentence, beam, max_len, alpha)))

    def caption_ids(self, feature: ImageFeature | np.ndarray, object_hint: tp.ProcessedText,
                    beam: int = DEFAULT_BEAM, max_len: int | None = None,
                    alpha: float = DEFAULT_ALPHA) -> list[int]:
        """Decode from IMG_BOS over ``[I; O]``; the hint supplies the object sequence."""
        if feature is None:
            raise InferenceError("caption route needs an image feature")
        patches = feature.patches if isinstance(feature, ImageFeature) else np.asarray(feature, dtype=np.float32)
        ex = encode_example("input", object_hint, self.vocab)
        ex.feature = patches
        if max_len is None:
            max_len = int(1.5 * max(len(object_hint.target), len(object_hint.objects))) + 5
        with nx.no_grad():
            batch = collate([ex], self.vocab.pad_id, with_images=True)
            enc = self.model.encode_batch(batch, with_images=True)
            (mem, valid), _ = self.model.memories(enc, batch, with_images=True)
            copy = self.model.copy_source(enc, batch)
            hyps = beam_search(self._step_fn(mem, valid, copy), IMG_BOS_ID, self.vocab.eos_id,
                               beam, max_len, alpha)
        return _strip(hyps[0].tokens, self.vocab.eos_id)

    def caption(self, feature, object_hint: tp.ProcessedText, beam: int = DEFAULT_BEAM,
                max_len: int | None = None, alpha: float = DEFAULT_ALPHA) -> str:
        return tp.detokenize(self.vocab.decode(self.caption_ids(feature, object_hint, beam, max_len, alpha)))


def paraphrase(sentence: str, model: ParaphraseModel, vocab: tp.Vocab, beam: int = DEFAULT_BEAM,
               max_len: int | None = None, alpha: float = DEFAULT_ALPHA) -> str:
    return Paraphraser(model, vocab).paraphrase(sentence, beam, max_len, alpha)


def caption(feature, object_hint: tp.ProcessedText, model: ParaphraseModel, vocab: tp.Vocab,
            beam: int = DEFAULT_BEAM, max_len: int | None = None, alpha: float = DEFAULT_ALPHA) -> str:
    return Paraphraser(model, vocab).caption(feature, object_hint, beam, max_len, alpha)
