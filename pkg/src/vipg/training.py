"""Losses, optimiser, schedule and the training loop.

The caption branch P_I is trained with cross-entropy against the gold
sentence. The paraphrase branch P_S never sees a gold-token loss; it learns
only through the symmetric KL term that pulls it towards P_I.
"""

from __future__ import annotations

import json
import logging
import math
import shlex
import subprocess
import tempfile
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ck
from . import numerics as nx
from .dataio import Batch, EncodedExample, make_batches
from .model import ModelConfig, ParaphraseModel
from .numerics import Tensor

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-9
ABLATIONS = ("full", "original_text", "no_kl_I_to_S", "no_kl_S_to_I", "no_copy", "copy_whole_sentence")
SELECTORS = ("val_total_loss", "external_scorer")


class TrainingError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _mask_tensor(mask, shape) -> tuple[Tensor, float]:
    m = np.broadcast_to(np.asarray(mask, dtype=bool), shape)
    return Tensor(m.astype(float)), float(m.sum())


def loss_ce(P: Tensor, target_ids: np.ndarray, pad_mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-probability of the gold tokens over non-pad positions."""
    gold = nx.take_last(P, target_ids)
    if pad_mask is None:
        pad_mask = np.ones(gold.shape, dtype=bool)
    m, n = _mask_tensor(pad_mask, gold.shape)
    if n == 0:
        return Tensor(0.0)
    return nx.sum_all(nx.log(gold, floor=PROB_FLOOR) * m) * (-1.0 / n)


def loss_kl(P: Tensor, Q: Tensor, pad_mask: np.ndarray | None = None, direction: str = "both") -> Tensor:
    """Position-averaged KL between two aligned distributions.

    ``both`` gives (1/2N) sum [KL(P||Q) + KL(Q||P)], written as
    sum (p - q)(log p - log q) so that swapping the arguments is exact.
    ``p_to_q`` and ``q_to_p`` give a single unhalved direction.
    """
    if P.shape != Q.shape:
        raise TrainingError(f"KL needs aligned distributions, got {P.shape} and {Q.shape}")
    lead = P.shape[:-1]
    if pad_mask is None:
        pad_mask = np.ones(lead, dtype=bool)
    m, n = _mask_tensor(np.asarray(pad_mask, dtype=bool)[..., None], P.shape)
    if n == 0:
        return Tensor(0.0)
    n_pos = n / P.shape[-1]
    lp, lq = nx.log(P, floor=PROB_FLOOR), nx.log(Q, floor=PROB_FLOOR)
    if direction == "both":
        terms, scale = (P - Q) * (lp - lq), 0.5 / n_pos
    elif direction == "p_to_q":
        terms, scale = P * (lp - lq), 1.0 / n_pos
    elif direction == "q_to_p":
        terms, scale = Q * (lq - lp), 1.0 / n_pos
    else:
        raise TrainingError(f"unknown KL direction {direction!r}")
    return nx.sum_all(terms * m) * scale


def total_loss(ce: Tensor, kl: Tensor, lambda_kl: float) -> Tensor:
    return ce + kl * lambda_kl


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


def inverse_sqrt_lr(step: int, base: float, d_model: int, warmup: int) -> float:
    """``base * d^-0.5 * min(step^-0.5, step * warmup^-1.5)`` for steps counted from 1."""
    step = max(step, 1)
    return base * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = np.float32(max_norm / (norm + 1e-6))
        grads = [g * scale for g in grads]
    return grads, norm


class Adam:
    def __init__(self, names: Sequence[str], shapes: Sequence[tuple], betas=(0.9, 0.98), eps=1e-9):
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros(s, dtype=np.float32) for n, s in zip(names, shapes)}
        self.v = {n: np.zeros(s, dtype=np.float32) for n, s in zip(names, shapes)}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float):
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            upd = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p = params[name]
            p.data = (p.data - upd).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# configuration and state
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    base_lr: float = 1.0
    warmup: int = 400
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-9
    batch_size: int = 16
    max_steps: int = 1000
    seed: int = 0
    lambda_kl: float | None = None  # None: use the model config value
    ablation: str = "full"
    clip_norm: float = 1.0
    val_every: int = 50
    selector: str = "val_total_loss"
    scorer_cmd: str | None = None
    scorer_higher_is_better: bool = True
    # stop KL gradients into the caption branch (one-way distillation)
    kl_stop_grad: bool = False

    def problems(self) -> list[str]:
        out = []
        if self.base_lr <= 0:
            out.append("base_lr must be > 0")
        if self.warmup < 1:
            out.append("warmup must be >= 1")
        if not all(0 <= b < 1 for b in self.betas):
            out.append("betas must be in [0, 1)")
        if self.batch_size < 1:
            out.append("batch_size must be >= 1")
        if self.max_steps < 0:
            out.append("max_steps must be >= 0")
        if self.lambda_kl is not None and self.lambda_kl < 0:
            out.append("lambda_kl must be >= 0")
        if self.ablation not in ABLATIONS:
            out.append(f"ablation must be one of {ABLATIONS}")
        if self.val_every < 1:
            out.append("val_every must be >= 1")
        if self.selector not in SELECTORS:
            out.append(f"selector must be one of {SELECTORS}")
        return out

    def validate(self) -> "TrainConfig":
        errs = self.problems()
        if errs:
            raise TrainingError("invalid train config: " + "; ".join(errs))
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise TrainingError(f"unknown train config fields: {sorted(unknown)}")
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)

    def kl_direction(self) -> str:
        # "no_kl_I_to_S" drops KL(p_I || p_S) and keeps KL(p_S || p_I), and vice versa
        return {"no_kl_I_to_S": "q_to_p", "no_kl_S_to_I": "p_to_q"}.get(self.ablation, "both")


def apply_ablation(model_cfg: ModelConfig, ablation: str) -> ModelConfig:
    """Model-side effect of an ablation; text-side effects live in preprocessing."""
    if ablation == "no_copy":
        return replace(model_cfg, copy_scope="none")
    if ablation == "copy_whole_sentence":
        return replace(model_cfg, copy_scope="sentence")
    return model_cfg


@dataclass
class TrainState:
    step: int
    optimizer: Adam
    best_score: float = math.inf
    best_step: int = -1


def new_state(model: ParaphraseModel, cfg: TrainConfig) -> TrainState:
    names = list(model.params)
    return TrainState(0, Adam(names, [model.params[n].shape for n in names], cfg.betas, cfg.eps))


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, 1])


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------


def compute_losses(model: ParaphraseModel, batch: Batch, cfg: TrainConfig, rng, training: bool = True):
    lam = model.cfg.lambda_kl if cfg.lambda_kl is None else cfg.lambda_kl
    fwd = model.forward_train(batch, rng, training=training)
    pad = np.arange(batch.target_ids.shape[1])[None, :] < batch.tgt_len[:, None]
    ce = loss_ce(fwd.P_I, batch.target_ids, pad)
    P_I = nx.detach(fwd.P_I) if cfg.kl_stop_grad else fwd.P_I
    if lam == 0:
        with nx.no_grad():
            kl = loss_kl(P_I, fwd.P_S, pad, cfg.kl_direction())
        return ce, kl, ce
    kl = loss_kl(P_I, fwd.P_S, pad, cfg.kl_direction())
    return ce, kl, total_loss(ce, kl, lam)


def train_step(model: ParaphraseModel, batch: Batch, state: TrainState, cfg: TrainConfig) -> dict:
    rng = step_rng(cfg.seed, state.step)
    try:
        ce, kl, total = compute_losses(model, batch, cfg, rng)
    except nx.NonFiniteError as e:
        raise TrainingDivergedError(f"step {state.step + 1}: non-finite value in forward pass ({e})") from e
    if not np.isfinite(total.data):
        raise TrainingDivergedError(f"step {state.step + 1}: loss is {total.item()}")
    for p in model.parameters():
        p.zero_grad()
    nx.backward(total)
    names = list(model.params)
    grads = [model.params[n].grad if model.params[n].grad is not None
             else np.zeros(model.params[n].shape, dtype=np.float32) for n in names]
    grads, norm = clip_by_global_norm(grads, cfg.clip_norm)
    if not math.isfinite(norm):
        raise TrainingDivergedError(f"step {state.step + 1}: gradient norm is {norm}")
    lr = inverse_sqrt_lr(state.step + 1, cfg.base_lr, model.cfg.d_model, cfg.warmup)
    state.optimizer.step(model.params, dict(zip(names, grads)), lr)
    for p in model.parameters():
        p.zero_grad()
    state.step += 1
    return {"step": state.step, "ce": ce.item(), "kl": kl.item(), "total": total.item(),
            "grad_norm": norm, "lr": lr}


def evaluate_losses(model: ParaphraseModel, batches: Sequence[Batch], cfg: TrainConfig) -> dict:
    """Token-weighted ce and kl with copy masking and dropout off."""
    lam = model.cfg.lambda_kl if cfg.lambda_kl is None else cfg.lambda_kl
    sums = {"ce": 0.0, "kl": 0.0}
    tokens = 0
    with nx.no_grad():
        for b in batches:
            ce, kl, _ = compute_losses(model, b, cfg, None, training=False)
            n = int(b.tgt_len.sum())
            sums["ce"] += ce.item() * n
            sums["kl"] += kl.item() * n
            tokens += n
    if tokens == 0:
        return {"ce": 0.0, "kl": 0.0, "total": 0.0}
    ce, kl = sums["ce"] / tokens, sums["kl"] / tokens
    return {"ce": ce, "kl": kl, "total": ce + lam * kl}


def run_external_scorer(cmd: str, candidates: Sequence[str], sources: Sequence[str]) -> float | None:
    """Run ``cmd`` with ``{candidates}`` and ``{sources}`` file paths; None on any failure."""
    with tempfile.TemporaryDirectory() as tmp:
        cand, src = Path(tmp) / "candidates.txt", Path(tmp) / "sources.txt"
        cand.write_text("".join(c + "\n" for c in candidates), encoding="utf-8")
        src.write_text("".join(s + "\n" for s in sources), encoding="utf-8")
        args = [a.format(candidates=cand, sources=src) for a in shlex.split(cmd)]
        if "{candidates}" not in cmd:
            args += [str(cand), str(src)]
        try:
            res = subprocess.run(args, capture_output=True, text=True, timeout=600)
            if res.returncode != 0:
                return None
            return float(res.stdout.strip().split()[-1])
        except (OSError, ValueError, IndexError, subprocess.TimeoutExpired):
            return None


def validate(model: ParaphraseModel, val_batches: Sequence[Batch], cfg: TrainConfig,
             val_sources: Sequence[str] | None = None, vocab=None) -> tuple[float, dict]:
    """Selection score, lower is better, plus the validation losses."""
    losses = evaluate_losses(model, val_batches, cfg)
    if cfg.selector == "external_scorer":
        score = None
        if cfg.scorer_cmd and val_sources and vocab is not None:
            from .inference import Paraphraser
            para = Paraphraser(model, vocab)
            cands = [para.paraphrase(s) for s in val_sources]
            score = run_external_scorer(cfg.scorer_cmd, cands, val_sources)
        if score is not None:
            losses["external"] = score
            return (-score if cfg.scorer_higher_is_better else score), losses
        log.warning("external scorer unavailable; falling back to val_total_loss")
    return losses["total"], losses


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


def _save_state(path: Path, state: TrainState, cfg: TrainConfig):
    opt = state.optimizer
    header = {"kind": "train_state", "step": state.step, "adam_t": opt.t,
              "best_score": None if math.isinf(state.best_score) else state.best_score,
              "best_step": state.best_step, "train_config": cfg.to_dict()}
    tensors = {}
    for name in opt.m:
        tensors["m." + name] = opt.m[name]
        tensors["v." + name] = opt.v[name]
    ck.write_container(path, header, tensors)


def _load_state(path: Path, model: ParaphraseModel, cfg: TrainConfig) -> TrainState:
    header, tensors = ck.read_container(path)
    if header.get("kind") != "train_state":
        raise ck.CheckpointError(f"{path}: not a training state file")
    state = new_state(model, cfg)
    for name in state.optimizer.m:
        state.optimizer.m[name] = tensors["m." + name].copy()
        state.optimizer.v[name] = tensors["v." + name].copy()
    state.optimizer.t = header["adam_t"]
    state.step = header["step"]
    state.best_score = math.inf if header["best_score"] is None else header["best_score"]
    state.best_step = header["best_step"]
    return state


def _truncate_log(path: Path, step: int):
    if not path.exists():
        return
    keep = [line for line in path.read_text(encoding="utf-8").splitlines()
            if line.strip() and json.loads(line)["step"] <= step]
    path.write_text("".join(line + "\n" for line in keep), encoding="utf-8")


@dataclass
class FitResult:
    best_path: Path
    latest_path: Path
    best_score: float
    best_step: int
    last_metrics: dict | None


def fit(model: ParaphraseModel, train: Sequence[EncodedExample], val: Sequence[EncodedExample],
        cfg: TrainConfig, out_dir: str | Path, meta: dict | None = None, resume: bool = False,
        vocab=None, val_sources: Sequence[str] | None = None, stop_after: int | None = None) -> FitResult:
    """Train for ``cfg.max_steps``, validating every ``cfg.val_every`` steps.

    Writes ``metrics.jsonl``, ``val_log.jsonl``, ``best.ckpt``,
    ``latest.ckpt`` and ``latest.state`` under ``out_dir``. ``stop_after``
    ends the loop early at that step (used to simulate interruptions).
    """
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = dict(meta or {})
    metrics_path, val_path = out / "metrics.jsonl", out / "val_log.jsonl"
    best_path, latest_path, state_path = out / "best.ckpt", out / "latest.ckpt", out / "latest.state"
    if not train:
        raise TrainingError("training set is empty")

    if resume and state_path.exists():
        restored, _ = ck.load_model(latest_path)
        for name, p in restored.params.items():
            model.params[name].data = p.data.copy()
        state = _load_state(state_path, model, cfg)
        _truncate_log(metrics_path, state.step)
        _truncate_log(val_path, state.step)
    else:
        state = new_state(model, cfg)
        for p in (metrics_path, val_path):
            p.write_text("", encoding="utf-8")
    val_batches = make_batches(val, cfg.batch_size, cfg.seed, shuffle=False) if val else []

    def checkpoint_now():
        if val_batches:
            score, losses = validate(model, val_batches, cfg, val_sources, vocab)
        else:
            score, losses = math.inf, {}
        with val_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps({"step": state.step, "score": score, **losses}) + "\n")
        # strict improvement only, so ties keep the earliest checkpoint
        if score < state.best_score or state.best_step < 0:
            state.best_score, state.best_step = score, state.step
            ck.save_model(best_path, model, step=state.step, score=score, **meta)
        ck.save_model(latest_path, model, step=state.step, **meta)
        _save_state(state_path, state, cfg)

    if state.step == 0 and state.best_step < 0:
        checkpoint_now()

    n_batches = math.ceil(len(train) / cfg.batch_size)
    cache: dict[int, list[Batch]] = {}
    last = None
    with metrics_path.open("a", encoding="utf-8") as log_fh:
        while state.step < cfg.max_steps:
            if stop_after is not None and state.step >= stop_after:
                break
            epoch, idx = divmod(state.step, n_batches)
            if epoch not in cache:
                cache.clear()
                cache[epoch] = make_batches(train, cfg.batch_size, cfg.seed, epoch)
            last = train_step(model, cache[epoch][idx], state, cfg)
            log_fh.write(json.dumps(last) + "\n")
            log_fh.flush()
            if state.step % cfg.val_every == 0 or state.step == cfg.max_steps:
                checkpoint_now()
    return FitResult(best_path, latest_path, state.best_score, state.best_step, last)
