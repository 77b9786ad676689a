"""Masking, optimization schedule, and the MLM / multi-objective loops.

All randomness is drawn from per-purpose generators seeded as
default_rng([seed, purpose]): 1 = example shuffling, 2 = MLM masking,
3 = MLM-pass dropout, 4 = auxiliary batch order, 5 = auxiliary dropout.
Keeping the streams separate makes the zero-weight multi-objective run
consume exactly the same MLM randomness as a plain MLM run, which the
tests check by comparing exported checkpoints byte for byte.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from . import model as mdl
from .autograd import Tensor
from .corpus import Document, GrammarExample, WiktionaryEntry, corpus_digest
from .model import ModelConfig, ParameterSet
from .subwords import (SubwordModel, pack_examples, PAD_ID, CLS_ID, SEP_ID,
                       MASK_ID, NUM_SPECIALS)

log = logging.getLogger(__name__)

IGNORE_INDEX = ag.IGNORE_INDEX

# rng stream ids (second word of the generator seed)
_STREAM_SHUFFLE = 1
_STREAM_MASK = 2
_STREAM_DROPOUT = 3
_STREAM_AUX_ORDER = 4
_STREAM_AUX_DROPOUT = 5


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 2e-4
    weight_decay: float = 0.01
    warmup_steps: int = 4000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 50
    context_size: int = 64
    seed: int = 0
    aux_weight: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be non-negative")
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ValueError("betas must lie in (0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.batch_size <= 0 or self.epochs <= 0:
            raise ValueError("batch_size and epochs must be positive")
        if self.context_size < 2:
            raise ValueError("context_size must be >= 2")
        if self.aux_weight < 0:
            raise ValueError("aux_weight must be non-negative")


@dataclass(frozen=True)
class MaskingConfig:
    mask_prob: float = 0.15
    mask_frac: float = 0.8
    random_frac: float = 0.1
    keep_frac: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError("mask_prob must lie in [0, 1]")
        total = self.mask_frac + self.random_frac + self.keep_frac
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"mask/random/keep fractions must sum to 1, got {total}")
        if min(self.mask_frac, self.random_frac, self.keep_frac) < 0:
            raise ValueError("fractions must be non-negative")


def apply_mlm_masking(example: np.ndarray, mcfg: MaskingConfig,
                      rng: np.random.Generator,
                      vocab_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Select eligible positions i.i.d. at mask_prob and corrupt them.

    Special tokens (ids < 6, including PAD) are never selected. Returns
    (corrupted ids, labels) where labels hold the original id at selected
    positions and IGNORE_INDEX elsewhere. Random draws cover every
    position regardless of eligibility, so consumption is shape-stable.
    """
    ids = np.asarray(example, dtype=np.int64)
    eligible = ids >= NUM_SPECIALS
    select = rng.random(ids.shape) < mcfg.mask_prob
    action = rng.random(ids.shape)
    replacement = rng.integers(NUM_SPECIALS, vocab_size, size=ids.shape)
    select &= eligible

    masked = ids.copy()
    use_mask = select & (action < mcfg.mask_frac)
    use_rand = select & (action >= mcfg.mask_frac) & (action < mcfg.mask_frac + mcfg.random_frac)
    masked[use_mask] = MASK_ID
    masked[use_rand] = replacement[use_rand]

    labels = np.where(select, ids, IGNORE_INDEX)
    return masked, labels


def lr_at(step: int, cfg: TrainingConfig, total_steps: int) -> float:
    """Linear warmup to learning_rate at warmup_steps, then linear decay
    to zero at total_steps. Continuous and piecewise-linear."""
    if total_steps <= cfg.warmup_steps:
        raise ValueError(
            f"total_steps ({total_steps}) must exceed warmup_steps ({cfg.warmup_steps})"
        )
    if step < 0:
        raise ValueError("step must be non-negative")
    if step <= cfg.warmup_steps:
        if cfg.warmup_steps == 0:
            return cfg.learning_rate
        return cfg.learning_rate * (step / cfg.warmup_steps)
    if step >= total_steps:
        return 0.0
    return cfg.learning_rate * ((total_steps - step) / (total_steps - cfg.warmup_steps))


class AdamWState:
    """First/second moment estimates and the shared step counter."""

    def __init__(self, params: ParameterSet):
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.t = 0


def adamw_step(params: ParameterSet, grads: dict[str, np.ndarray],
               state: AdamWState, lr: float,
               cfg: TrainingConfig) -> tuple[ParameterSet, AdamWState]:
    """One AdamW update with bias correction; decoupled weight decay is
    applied to weight matrices only (ndim >= 2), not norms or biases."""
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite gradient")
    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    for name, t in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        if t.data.ndim >= 2:
            update = update + cfg.weight_decay * t.data
        t.data -= lr * update
    return params, state


class TrainLog:
    """Per-step records plus the run manifest; steps strictly increase."""

    def __init__(self, manifest: dict):
        self.manifest = manifest
        self.steps: list[dict] = []

    def append(self, step: int, lr: float, losses: dict[str, float], total: float) -> None:
        if self.steps and step <= self.steps[-1]["step"]:
            raise ValueError("steps must be strictly increasing")
        self.steps.append({"step": step, "lr": lr, "losses": dict(losses), "total": total})

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(json.dumps({"kind": "manifest", **self.manifest}, sort_keys=True) + "\n")
            for rec in self.steps:
                f.write(json.dumps({"kind": "step", **rec}, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "TrainLog":
        with open(path, encoding="utf-8") as f:
            lines = [json.loads(line) for line in f if line.strip()]
        if not lines or lines[0].get("kind") != "manifest":
            raise ValueError(f"{path}: first record must be the manifest")
        manifest = {k: v for k, v in lines[0].items() if k != "kind"}
        out = cls(manifest)
        for rec in lines[1:]:
            out.append(rec["step"], rec["lr"], rec["losses"], rec["total"])
        return out


def _run_manifest(objective: str, docs: Sequence[Document], n_examples: int,
                  total_steps: int, model_cfg: ModelConfig,
                  cfg: TrainingConfig, mcfg: MaskingConfig) -> dict:
    return {
        "objective": objective,
        "model_config": asdict(model_cfg),
        "training_config": asdict(cfg),
        "masking_config": asdict(mcfg),
        "corpus_hash": corpus_digest(docs),
        "n_documents": len(docs),
        "n_examples": n_examples,
        "total_steps": total_steps,
        "seed": cfg.seed,
    }


def _mlm_step_loss(params: ParameterSet, batch: np.ndarray, mcfg: MaskingConfig,
                   mask_rng: np.random.Generator,
                   dropout_rng: np.random.Generator | None) -> Tensor | None:
    """Forward one MLM batch; None when masking selected nothing."""
    v = params.config.vocab_size
    masked, labels = apply_mlm_masking(batch, mcfg, mask_rng, v)
    if not np.any(labels != IGNORE_INDEX):
        return None
    out = mdl.encoder_forward(params, masked, batch != PAD_ID, dropout_rng)
    logits = mdl.mlm_logits(params, out)
    b, t, _ = logits.shape
    return ag.cross_entropy(ag.reshape(logits, (b * t, v)), labels.reshape(-1))


def train_mlm(docs: Sequence[Document], subwords: SubwordModel,
              model_cfg: ModelConfig, cfg: TrainingConfig,
              mcfg: MaskingConfig | None = None,
              checkpoint_dir: str | Path | None = None,
              checkpoint_interval: int = 0) -> tuple[ParameterSet, TrainLog]:
    """Masked-language-model pretraining, deterministic given cfg.seed."""
    mcfg = mcfg or MaskingConfig()
    if not docs:
        raise ValueError("corpus is empty")
    if model_cfg.max_positions < cfg.context_size:
        raise ValueError("model max_positions is smaller than context_size")
    packed = pack_examples(subwords, docs, cfg.context_size)
    n = packed.shape[0]
    if n == 0:
        raise ValueError("corpus packed to zero examples")
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    manifest = _run_manifest("mlm", docs, n, total_steps, model_cfg, cfg, mcfg)
    tlog = TrainLog(manifest)

    params = mdl.init_params(model_cfg)
    state = AdamWState(params)
    shuffle_rng = np.random.default_rng([cfg.seed, _STREAM_SHUFFLE])
    mask_rng = np.random.default_rng([cfg.seed, _STREAM_MASK])
    drop_rng = np.random.default_rng([cfg.seed, _STREAM_DROPOUT]) if model_cfg.dropout else None

    step = 0
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        epoch_losses = []
        for lo in range(0, n, cfg.batch_size):
            batch = packed[order[lo: lo + cfg.batch_size]]
            loss = _mlm_step_loss(params, batch, mcfg, mask_rng, drop_rng)
            if loss is None:
                continue
            grads = mdl.backward(params, loss)
            lr = lr_at(step, cfg, total_steps)
            adamw_step(params, grads, state, lr, cfg)
            val = float(loss.data)
            tlog.append(step, lr, {"mlm": val}, val)
            epoch_losses.append(val)
            step += 1
            if checkpoint_dir and checkpoint_interval and step % checkpoint_interval == 0:
                mdl.save_checkpoint(params, Path(checkpoint_dir) / f"step{step:08d}.bin")
        if epoch_losses:
            log.info("epoch %d/%d: mean mlm loss %.4f",
                     epoch + 1, cfg.epochs, sum(epoch_losses) / len(epoch_losses))
    return params, tlog


# -- auxiliary objectives ----------------------------------------------------

@dataclass
class AuxItem:
    """One auxiliary example: encoder input, where the decoder looks, and
    the teacher-forced decoder input/labels."""
    enc_ids: list[int]
    mem_index: int | None        # None = cross-attend to all hidden states
    dec_in: list[int]
    dec_labels: list[int]


def find_word_span(text: str, word: str) -> tuple[int, int] | None:
    """Character span of `word` as a whole word in text, ignoring case."""
    m = re.search(rf"(?<!\w){re.escape(word)}(?!\w)", text, re.IGNORECASE)
    return (m.start(), m.end()) if m else None


def build_definition_batch(entries: Sequence[WiktionaryEntry],
                           subwords: SubwordModel) -> list[AuxItem]:
    """One item per (entry, example sentence containing the headword).

    The headword's first subword is marked in the encoder input; the
    decoder target is the definition bounded by SEP. Examples that do not
    contain the headword as a whole word are skipped with a log line.
    """
    items: list[AuxItem] = []
    for entry in entries:
        def_ids = subwords.encode(entry.definition)
        for example in entry.examples:
            span = find_word_span(example, entry.word)
            if span is None:
                log.info("skipping example without headword %r: %r", entry.word, example)
                continue
            ids, offsets = subwords.encode_with_offsets(example)
            tok = mdl.locate_token(offsets, span)
            marked, index = mdl.mark_position(ids, tok)
            items.append(AuxItem(
                enc_ids=marked,
                mem_index=index,
                dec_in=[CLS_ID] + def_ids,
                dec_labels=def_ids + [SEP_ID],
            ))
    return items


def render_tag_answer(value: str | tuple[str, ...]) -> str:
    if isinstance(value, tuple):
        return ", ".join(value)
    return {"yes": "yes", "no": "no", "n/a": "N/A"}[value]


def build_grammar_batch(examples: Sequence[GrammarExample],
                        subwords: SubwordModel) -> list[AuxItem]:
    """One item per (sentence, tag): the decoder answers whether/where a
    grammatical notion appears, as "notion <name> : <answer>"."""
    items: list[AuxItem] = []
    for ex in examples:
        enc_ids = subwords.encode(ex.sentence)
        for tag in ex.tags:
            target = f"notion {tag.notion} : {render_tag_answer(tag.value)}"
            tgt_ids = subwords.encode(target)
            items.append(AuxItem(
                enc_ids=enc_ids,
                mem_index=None,
                dec_in=[CLS_ID] + tgt_ids,
                dec_labels=tgt_ids + [SEP_ID],
            ))
    return items


def _pad_2d(rows: list[list[int]], fill: int) -> np.ndarray:
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), fill, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def _aux_step_loss(params: ParameterSet, items: list[AuxItem],
                   dropout_rng: np.random.Generator | None) -> Tensor:
    """Forward a batch of auxiliary items; returns decoder cross-entropy."""
    enc_ids = _pad_2d([it.enc_ids for it in items], PAD_ID)
    enc_mask = enc_ids != PAD_ID
    out = mdl.encoder_forward(params, enc_ids, enc_mask, dropout_rng)
    if items[0].mem_index is not None:
        idx = np.array([it.mem_index for it in items])
        b, t, d = out.hidden.shape
        flat = ag.reshape(out.hidden, (b * t, d))
        memory = ag.reshape(ag.gather_rows(flat, np.arange(b) * t + idx), (b, 1, d))
        mem_mask = None
    else:
        memory = out.hidden
        mem_mask = enc_mask
    dec_in = _pad_2d([it.dec_in for it in items], PAD_ID)
    labels = _pad_2d([it.dec_labels for it in items], IGNORE_INDEX)
    logits = mdl.decoder_forward(params, dec_in, memory, mem_mask, dropout_rng)
    b, t, v = logits.shape
    return ag.cross_entropy(ag.reshape(logits, (b * t, v)), labels.reshape(-1))


def train_multi_objective(docs: Sequence[Document], subwords: SubwordModel,
                          aux_items: Sequence[AuxItem], objective: str,
                          model_cfg: ModelConfig, cfg: TrainingConfig,
                          mcfg: MaskingConfig | None = None) -> tuple[ParameterSet, TrainLog]:
    """Joint MLM + auxiliary training; exports a stripped encoder.

    Each step draws one MLM batch and one auxiliary batch (round-robin
    over a per-cycle shuffle) and applies gradients of
    mlm_loss + aux_weight * aux_loss. The auxiliary pass always runs, so
    aux_weight = 0 reduces exactly to train_mlm for the encoder weights.
    objective is "definition" (marked-token memory) or "grammar" (full
    hidden-state memory); items longer than max_positions are dropped.
    """
    mcfg = mcfg or MaskingConfig()
    if objective not in ("definition", "grammar"):
        raise ValueError(f"unknown objective {objective!r}")
    if model_cfg.decoder_layers == 0:
        raise ValueError("multi-objective training requires decoder_layers > 0")
    if not docs:
        raise ValueError("corpus is empty")
    limit = model_cfg.max_positions
    usable = [it for it in aux_items
              if len(it.enc_ids) <= limit and len(it.dec_in) <= limit]
    if len(usable) < len(aux_items):
        log.info("dropped %d over-length auxiliary items", len(aux_items) - len(usable))
    if not usable:
        raise ValueError("no usable auxiliary items")

    packed = pack_examples(subwords, docs, cfg.context_size)
    n = packed.shape[0]
    if n == 0:
        raise ValueError("corpus packed to zero examples")
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    manifest = _run_manifest(f"mlm+{objective}", docs, n, total_steps, model_cfg, cfg, mcfg)
    manifest["n_aux_items"] = len(usable)
    manifest["aux_weight"] = cfg.aux_weight
    tlog = TrainLog(manifest)

    params = mdl.init_params(model_cfg)
    state = AdamWState(params)
    shuffle_rng = np.random.default_rng([cfg.seed, _STREAM_SHUFFLE])
    mask_rng = np.random.default_rng([cfg.seed, _STREAM_MASK])
    drop_rng = np.random.default_rng([cfg.seed, _STREAM_DROPOUT]) if model_cfg.dropout else None
    aux_rng = np.random.default_rng([cfg.seed, _STREAM_AUX_ORDER])
    aux_drop = np.random.default_rng([cfg.seed, _STREAM_AUX_DROPOUT]) if model_cfg.dropout else None

    aux_order: list[int] = []
    aux_pos = 0

    def next_aux_batch(size: int) -> list[AuxItem]:
        nonlocal aux_order, aux_pos
        picked = []
        for _ in range(size):
            if aux_pos >= len(aux_order):
                aux_order = list(aux_rng.permutation(len(usable)))
                aux_pos = 0
            picked.append(usable[aux_order[aux_pos]])
            aux_pos += 1
        return picked

    lam = cfg.aux_weight
    step = 0
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        epoch_aux = []
        for lo in range(0, n, cfg.batch_size):
            batch = packed[order[lo: lo + cfg.batch_size]]
            mlm_loss = _mlm_step_loss(params, batch, mcfg, mask_rng, drop_rng)
            if mlm_loss is None:
                continue
            g_mlm = mdl.backward(params, mlm_loss)
            aux_loss = _aux_step_loss(params, next_aux_batch(cfg.batch_size), aux_drop)
            g_aux = mdl.backward(params, aux_loss)
            if lam == 0.0:
                grads = g_mlm
            else:
                grads = {k: g_mlm[k] + lam * g_aux[k] for k in g_mlm}
            lr = lr_at(step, cfg, total_steps)
            adamw_step(params, grads, state, lr, cfg)
            losses = {"mlm": float(mlm_loss.data), objective: float(aux_loss.data)}
            tlog.append(step, lr, losses, losses["mlm"] + lam * losses[objective])
            epoch_aux.append(losses[objective])
            step += 1
        if epoch_aux:
            log.info("epoch %d/%d: mean %s loss %.4f",
                     epoch + 1, cfg.epochs, objective, sum(epoch_aux) / len(epoch_aux))
    return mdl.strip_decoder(params), tlog
