"""Deterministic training: AdamW, supervised byte sequences, finetuning.

The optimizer is decoupled-weight-decay Adam with the exact update

    m_t = b1 * m_{t-1} + (1 - b1) * g
    v_t = b2 * v_{t-1} + (1 - b2) * g^2
    mhat = m_t / (1 - b1^t),  vhat = v_t / (1 - b2^t)
    p   -= lr * (mhat / (sqrt(vhat) + eps) + wd * p)

with b1 = 0.9, b2 = 0.999, eps = 1e-8, applied to parameters in sorted
name order. Training runs are bit-deterministic functions of
(start state, dataset, config): example order is a seeded shuffle per
epoch, the learning rate ramps linearly over the warmup epochs and stays
constant after, and gradients are clipped to a global norm before every
step.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import ckpt as ckpt_mod
from . import lm
from . import tensor as T
from .ckpt import CheckpointRecord, Ledger
from .synthbench import Document, QaItem, qa_text

ADAM_B1 = 0.9
ADAM_B2 = 0.999
ADAM_EPS = 1e-8


class TrainError(Exception):
    pass


class TrainingDivergedError(TrainError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    epochs: int = 5
    warmup_epochs: int = 1
    batch_size: int = 16
    seed: int = 0
    checkpoint_every_tokens: int = 0  # 0 disables intermediate checkpoints
    grad_clip_norm: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise TrainError("learning_rate must be positive")
        if self.epochs < 1:
            raise TrainError("epochs must be at least 1")
        if self.batch_size < 1:
            raise TrainError("batch_size must be at least 1")


# ---------------------------------------------------------------------------
# examples


@dataclass
class TrainExample:
    """Token ids plus a bool mask marking the supervised positions.

    Position t is supervised when the model should be trained to predict
    ids[t] from ids[:t]; position 0 (BOS) is never supervised.
    """

    ids: list
    supervised: list

    @property
    def n_tokens(self) -> int:
        return len(self.ids)


def doc_example(text: str) -> TrainExample:
    ids = lm.encode(text) + [lm.EOT_ID]
    supervised = [False] + [True] * (len(ids) - 1)
    return TrainExample(ids=ids, supervised=supervised)


def qa_example(question: str, answer: str) -> TrainExample:
    """QA pair with supervision only on the answer tokens (and EOT)."""
    prompt, completion = qa_text(question, answer)
    prompt_ids = lm.encode(prompt)
    ids = prompt_ids + list(completion.encode("utf-8")) + [lm.EOT_ID]
    supervised = [False] * len(prompt_ids) + [True] * (len(ids) - len(prompt_ids))
    return TrainExample(ids=ids, supervised=supervised)


def examples_from(docs: list[Document] = (), qa: list[QaItem] = ()) -> list[TrainExample]:
    out = [doc_example(d.text) for d in docs]
    out.extend(qa_example(q.question, q.answer) for q in qa)
    return out


def count_tokens(examples: list[TrainExample]) -> int:
    return sum(e.n_tokens for e in examples)


def sample_retain_subset(items: list, n: int, seed: int) -> list:
    """Uniform subset without replacement, deterministic per seed."""
    if n > len(items):
        raise TrainError(f"cannot sample {n} of {len(items)} items")
    order = np.random.default_rng(seed).permutation(len(items))
    return [items[i] for i in order[:n]]


def _pad_batch(examples: list[TrainExample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    width = max(e.n_tokens for e in examples)
    ids = np.full((len(examples), width), lm.EOT_ID, dtype=np.int64)
    sup = np.zeros((len(examples), width), dtype=bool)
    for j, e in enumerate(examples):
        ids[j, : e.n_tokens] = e.ids
        sup[j, : e.n_tokens] = e.supervised
    return ids, sup, np.array([e.n_tokens for e in examples])


def batch_loss(params: dict, config: lm.LmConfig, batch: list[TrainExample]) -> tuple[T.Tensor, dict]:
    """Masked next-token cross entropy over a padded batch.

    Returns the scalar loss tensor and the leaf tensors (for backward).
    """
    ids, sup, _ = _pad_batch(batch)
    leaves = {k: T.Tensor(v, requires_grad=True) for k, v in params.items()}
    logits = lm.graph_logits(leaves, config, ids)
    b = ids.shape[0]
    # logits at position t score the token at t+1; the trailing dummy target
    # column is never supervised
    targets = np.concatenate([ids[:, 1:], np.full((b, 1), lm.EOT_ID, dtype=np.int64)], axis=1)
    mask = np.concatenate([sup[:, 1:], np.zeros((b, 1), dtype=bool)], axis=1)
    loss = T.cross_entropy(logits, targets, mask)
    return loss, leaves


def dataset_mean_nll(params: dict, config: lm.LmConfig, examples: list[TrainExample],
                     batch_size: int = 16) -> float:
    """Supervised-token mean NLL over a dataset (no gradients)."""
    total, count = 0.0, 0
    for i in range(0, len(examples), batch_size):
        batch = examples[i : i + batch_size]
        ids, sup, _ = _pad_batch(batch)
        tensors = {k: T.Tensor(v) for k, v in params.items()}
        logits = lm.graph_logits(tensors, config, ids).data.astype(np.float64)
        m = logits.max(axis=-1, keepdims=True)
        z = logits - m
        ls = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        tgt = np.concatenate([ids[:, 1:], np.full((ids.shape[0], 1), lm.EOT_ID, dtype=np.int64)], axis=1)
        msk = np.concatenate([sup[:, 1:], np.zeros((ids.shape[0], 1), dtype=bool)], axis=1)
        picked = np.take_along_axis(ls, tgt[..., None], axis=-1)[..., 0]
        total += float(-(picked * msk).sum())
        count += int(msk.sum())
    if count == 0:
        raise T.DegenerateBatchError("dataset has no supervised positions")
    return total / count


# ---------------------------------------------------------------------------
# optimizer


def init_adam_state(params: dict) -> dict:
    return {k: (np.zeros_like(v), np.zeros_like(v)) for k, v in sorted(params.items())}


def adamw_step(params: dict, grads: dict, state: dict, t: int, cfg: TrainConfig) -> tuple[dict, dict]:
    """One AdamW update, in place, parameters visited in sorted name order."""
    bc1 = 1.0 - ADAM_B1**t
    bc2 = 1.0 - ADAM_B2**t
    for name in sorted(params):
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(t, f"non-finite gradient for {name!r}")
        p = params[name]
        m, v = state[name]
        m *= ADAM_B1
        m += (1.0 - ADAM_B1) * g
        v *= ADAM_B2
        v += (1.0 - ADAM_B2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        update = mhat / (np.sqrt(vhat) + ADAM_EPS) + cfg.weight_decay * p
        p -= p.dtype.type(cfg.learning_rate) * update.astype(p.dtype)
    return params, state


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale gradients to a global norm bound; returns the pre-clip norm."""
    sq = 0.0
    for name in sorted(grads):
        g = grads[name].astype(np.float64)
        sq += float((g * g).sum())
    norm = float(np.sqrt(sq))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for name in sorted(grads):
            grads[name] = (grads[name].astype(np.float64) * factor).astype(grads[name].dtype)
    return norm


# ---------------------------------------------------------------------------
# finetuning loop


def finetune(
    start_params: dict,
    config: lm.LmConfig,
    dataset: list[TrainExample],
    cfg: TrainConfig,
    *,
    tokens_seen_start: int = 0,
    step_start: int = 0,
    run_id: str = "",
    stage_tag: str = "",
    created_at: str = "1970-01-01T00:00:00+00:00",
    ledger: Ledger | None = None,
    ckpt_dir: str | Path | None = None,
    loss_fn=None,
) -> tuple[lm.LmModel, list[CheckpointRecord]]:
    """Train a private copy of ``start_params`` on ``dataset``.

    Emits a checkpoint record whenever the cumulative token count crosses a
    ``checkpoint_every_tokens`` boundary and always at the end of the run;
    records are written to ``ckpt_dir`` and appended to ``ledger`` when one
    is given, otherwise kept in memory. ``loss_fn(params, config, batch)``
    may replace the standard next-token loss (it must return a scalar loss
    tensor and the leaf tensor dict).
    """
    if not dataset:
        raise TrainError("dataset is empty")
    params = ckpt_mod.clone_state(start_params)
    state = init_adam_state(params)
    rng = np.random.default_rng(cfg.seed)
    n = len(dataset)
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    loss_fn = loss_fn or batch_loss

    tokens_seen = tokens_seen_start
    next_mark = None
    if cfg.checkpoint_every_tokens > 0:
        next_mark = (tokens_seen // cfg.checkpoint_every_tokens + 1) * cfg.checkpoint_every_tokens

    records: list[CheckpointRecord] = []

    def emit(step_idx: int) -> None:
        rec = CheckpointRecord(
            params=ckpt_mod.clone_state(params),
            tokens_seen=tokens_seen,
            step=step_idx,
            run_id=run_id,
            stage_tag=stage_tag,
            created_at=created_at,
        )
        records.append(rec)
        if ledger is not None:
            if ckpt_dir is None:
                raise TrainError("ledger given without ckpt_dir")
            path = Path(ckpt_dir) / f"{run_id}_{stage_tag}_{rec.tokens_seen:012d}.msck"
            ckpt_mod.save(rec, path)
            ledger.append(rec, path)

    step = step_start
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for i in range(0, n, cfg.batch_size):
            batch = [dataset[j] for j in order[i : i + cfg.batch_size]]
            loss, leaves = loss_fn(params, config, batch)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise TrainingDivergedError(step, f"loss is {loss_val}")
            T.backward(loss)
            grads = {}
            for k in sorted(params):
                g = leaves[k].grad
                grads[k] = g if g is not None else np.zeros_like(params[k])
            clip_gradients(grads, cfg.grad_clip_norm)

            lr_scale = 1.0 if warmup_steps == 0 else min(1.0, (step - step_start + 1) / warmup_steps)
            step_cfg = replace(cfg, learning_rate=cfg.learning_rate * lr_scale)
            adamw_step(params, grads, state, step - step_start + 1, step_cfg)

            tokens_seen += sum(e.n_tokens for e in batch)
            step += 1
            if next_mark is not None:
                while tokens_seen >= next_mark:
                    emit(step)
                    next_mark += cfg.checkpoint_every_tokens

    emit(step)
    return lm.LmModel(params=params, config=config), records
