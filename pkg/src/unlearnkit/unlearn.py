"""Unlearning algorithms over model states.

The centerpiece extracts a *forget vector* by finetuning an earlier
checkpoint (one that predates the model's exposure to the forget data) on
the forget set, then subtracts a scaled copy of that vector from the
target model; optionally a *retain vector*, extracted the same way from a
size-matched retain subsample, is added back:

    theta_unlearn = theta_D - alpha * (theta_1 - theta_0)
                            + beta  * (theta_2 - theta_0)

Also provided: the task-vector variant (same arithmetic with the target
model itself standing in for the checkpoint), gradient-difference and
preference-ratio (NPO-style) finetuning baselines, and update lifting,
which transplants a weight-space update computed at a checkpoint onto the
target model at a tunable scale.

Every routine leaves its input states untouched and is bit-deterministic
for fixed inputs and configs. Runtime scales with the forget set size
only; the retain pass always runs on a subsample matched to |forget set|.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ckpt as ckpt_mod
from . import lm
from . import tensor as T
from .ckpt import CheckpointRecord, Ledger, StateDelta, apply, delta, ledger_query
from .training import (
    TrainConfig,
    TrainError,
    TrainingDivergedError,
    _pad_batch,
    adamw_step,
    batch_loss,
    clip_gradients,
    finetune,
    init_adam_state,
    sample_retain_subset,
)

VALID_ALGORITHMS = ("task_vector", "grad_diff", "npo")


class UnlearnError(Exception):
    pass


@dataclass(frozen=True)
class MsaConfig:
    """Settings for checkpoint-based vector unlearning.

    ``checkpoint_ref`` selects the earlier state: an int is a tokens-seen
    bound resolved through the ledger, a str/Path is an explicit checkpoint
    file, and a CheckpointRecord is used as-is. ``retain_from`` picks where
    the retain-vector finetune starts: the checkpoint itself (default) or
    the forget-tuned state ("forget_tuned").

    ``ft`` is the vector-extraction finetune; ``ft2nd`` optionally appends
    a second lower-rate pass (mirroring two-phase training stages), and
    ``ft_repeat`` oversamples the forget set inside the extraction run so
    the vector's magnitude matches a training stage that revisited the
    forget data more often than the rest of its corpus.
    """

    alpha: float
    beta: float = 0.0
    checkpoint_ref: object = None
    ft: TrainConfig = field(default_factory=TrainConfig)
    ft2nd: TrainConfig | None = None
    ft_retain: TrainConfig | None = None
    ft_repeat: int = 1
    retain_from: str = "checkpoint"

    def __post_init__(self):
        if not np.isfinite(self.alpha) or not np.isfinite(self.beta):
            raise UnlearnError("alpha and beta must be finite")
        if self.alpha < 0 or self.beta < 0:
            raise UnlearnError("alpha and beta must be non-negative")
        if self.ft_repeat < 1:
            raise UnlearnError("ft_repeat must be at least 1")
        if self.retain_from not in ("checkpoint", "forget_tuned"):
            raise UnlearnError(f"unknown retain_from {self.retain_from!r}")


@dataclass(frozen=True)
class BaselineConfig:
    algorithm: str
    ft: TrainConfig = field(default_factory=TrainConfig)
    lambda_retain: float = 1.0
    npo_beta: float = 0.1
    lifted_from: object = None
    lift_alpha: float = 1.0

    def __post_init__(self):
        if self.algorithm not in VALID_ALGORITHMS:
            raise UnlearnError(f"unknown algorithm {self.algorithm!r}")
        if self.lambda_retain < 0:
            raise UnlearnError("lambda_retain must be non-negative")
        if self.algorithm == "npo" and self.npo_beta <= 0:
            raise UnlearnError("npo_beta must be positive")


def resolve_checkpoint(ref, ledger: Ledger | None) -> CheckpointRecord:
    if isinstance(ref, CheckpointRecord):
        return ref
    if isinstance(ref, (str, Path)):
        return ckpt_mod.load(ref)
    if isinstance(ref, (int, np.integer)):
        if ledger is None:
            raise UnlearnError("tokens-seen checkpoint_ref needs a ledger")
        return ledger_query(ledger, int(ref))
    raise UnlearnError(f"cannot resolve checkpoint from {type(ref).__name__}")


# ---------------------------------------------------------------------------
# vector extraction and merging


def _staged_finetune(start: dict, lm_config, dataset: list, cfg: MsaConfig,
                     primary: TrainConfig) -> dict:
    tuned, _ = finetune(start, lm_config, dataset, primary)
    if cfg.ft2nd is not None:
        tuned, _ = finetune(tuned.params, lm_config, dataset, cfg.ft2nd)
    return tuned.params


def extract_vectors(
    checkpoint: CheckpointRecord,
    lm_config: lm.LmConfig,
    forget_set: list,
    retain_set: list | None,
    cfg: MsaConfig,
) -> tuple[StateDelta, StateDelta | None]:
    """Finetune the checkpoint on the forget set (and on a size-matched
    retain subsample) and return the weight-space difference vectors."""
    theta_0 = checkpoint.params
    theta_1 = _staged_finetune(theta_0, lm_config, list(forget_set) * cfg.ft_repeat, cfg, cfg.ft)
    theta_f = delta(theta_0, theta_1, compute_dtype=np.float64)

    theta_r = None
    if retain_set is not None:
        if not retain_set:
            raise UnlearnError("retain_set given but empty")
        subset = sample_retain_subset(retain_set, min(len(forget_set), len(retain_set)), cfg.ft.seed)
        start = theta_1 if cfg.retain_from == "forget_tuned" else theta_0
        theta_2 = _staged_finetune(start, lm_config, subset, cfg, cfg.ft_retain or cfg.ft)
        theta_r = delta(theta_0, theta_2, compute_dtype=np.float64)
    return theta_f, theta_r


def merge_vectors(
    theta_D: dict,
    theta_f: StateDelta,
    alpha: float,
    theta_r: StateDelta | None = None,
    beta: float = 0.0,
    compute_dtype=np.float64,
) -> dict:
    """theta_D - alpha * theta_f (+ beta * theta_r), inputs untouched."""
    out = apply(theta_D, theta_f, -alpha, compute_dtype=compute_dtype)
    if theta_r is not None:
        out = apply(out, theta_r, beta, compute_dtype=compute_dtype)
    return out


def msa_unlearn(
    theta_D: dict,
    ledger: Ledger | None,
    forget_set: list,
    retain_set: list | None,
    cfg: MsaConfig,
    lm_config: lm.LmConfig,
) -> dict:
    """Checkpoint-based unlearning of ``forget_set`` from ``theta_D``.

    Resolves the configured checkpoint, extracts the forget vector (and
    retain vector when a retain set is supplied), and merges them into the
    target state at (alpha, beta).
    """
    checkpoint = resolve_checkpoint(cfg.checkpoint_ref, ledger)
    ckpt_mod.check_same_schema(theta_D, checkpoint.params)
    theta_f, theta_r = extract_vectors(checkpoint, lm_config, forget_set, retain_set, cfg)
    return merge_vectors(theta_D, theta_f, cfg.alpha, theta_r, cfg.beta)


def task_vector_unlearn(
    theta_D: dict,
    forget_set: list,
    alpha: float,
    ft_cfg: TrainConfig,
    lm_config: lm.LmConfig,
    retain_set: list | None = None,
    beta: float = 0.0,
) -> dict:
    """Vector unlearning with the target model itself as the checkpoint."""
    cfg = MsaConfig(
        alpha=alpha,
        beta=beta,
        checkpoint_ref=CheckpointRecord(params=theta_D, stage_tag="target"),
        ft=ft_cfg,
    )
    return msa_unlearn(theta_D, None, forget_set, retain_set, cfg, lm_config)


def lift_update(theta_D: dict, theta_0: dict, theta_1: dict, alpha: float) -> dict:
    """Transplant the update direction theta_1 - theta_0 onto theta_D:

        theta_D + alpha * (theta_1 - theta_0)

    With theta_0 = theta_D this reduces exactly to applying the update at
    scale alpha.
    """
    return apply(theta_D, delta(theta_0, theta_1, compute_dtype=np.float64), alpha)


# ---------------------------------------------------------------------------
# gradient-based baselines


def _shifted_targets(ids: np.ndarray, sup: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    b = ids.shape[0]
    targets = np.concatenate([ids[:, 1:], np.full((b, 1), lm.EOT_ID, dtype=np.int64)], axis=1)
    mask = np.concatenate([sup[:, 1:], np.zeros((b, 1), dtype=bool)], axis=1)
    return targets, mask


def _dual_set_descent(
    theta_D: dict,
    lm_config: lm.LmConfig,
    forget_set: list,
    retain_set: list | None,
    cfg: TrainConfig,
    step_loss,
) -> dict:
    """Shared loop for the finetuning baselines.

    Walks the forget set in seeded shuffled batches; pairs each batch with
    a batch from a retain subsample matched to the forget-set size (cycled
    when lengths differ). ``step_loss(params, batch_f, batch_r)`` returns
    the scalar loss tensor plus the parameter leaves.
    """
    if not forget_set:
        raise TrainError("forget_set is empty")
    params = ckpt_mod.clone_state(theta_D)
    state = init_adam_state(params)
    rng_f = np.random.default_rng(cfg.seed)
    rng_r = np.random.default_rng(cfg.seed)
    retain_sub = None
    if retain_set is not None:
        if not retain_set:
            raise TrainError("retain_set is empty")
        retain_sub = sample_retain_subset(retain_set, min(len(forget_set), len(retain_set)), cfg.seed)

    n = len(forget_set)
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    step = 0
    for epoch in range(cfg.epochs):
        order_f = rng_f.permutation(n)
        order_r = rng_r.permutation(len(retain_sub)) if retain_sub is not None else None
        for i in range(0, n, cfg.batch_size):
            batch_f = [forget_set[j] for j in order_f[i : i + cfg.batch_size]]
            batch_r = None
            if retain_sub is not None:
                picks = [order_r[(i + k) % len(retain_sub)] for k in range(len(batch_f))]
                batch_r = [retain_sub[j] for j in picks]
            loss, leaves = step_loss(params, batch_f, batch_r)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise TrainingDivergedError(step, f"loss is {loss_val}")
            T.backward(loss)
            grads = {k: (leaves[k].grad if leaves[k].grad is not None else np.zeros_like(params[k]))
                     for k in sorted(params)}
            clip_gradients(grads, cfg.grad_clip_norm)
            lr_scale = 1.0 if warmup_steps == 0 else min(1.0, (step + 1) / warmup_steps)
            adamw_step(params, grads, state, step + 1, replace(cfg, learning_rate=cfg.learning_rate * lr_scale))
            step += 1
    return params


def grad_diff_unlearn(
    theta_D: dict,
    forget_set: list,
    retain_set: list | None,
    lam: float,
    cfg: TrainConfig,
    lm_config: lm.LmConfig,
    forget_weight: float = 1.0,
) -> dict:
    """Gradient difference: ascend the forget-set NLL while descending a
    retain-set NLL weighted by ``lam``. ``forget_weight=0`` disables the
    ascent term entirely, leaving plain finetuning on the retain subsample.
    """

    def step_loss(params, batch_f, batch_r):
        if forget_weight == 0.0:
            if batch_r is None:
                raise TrainError("forget_weight=0 requires a retain set")
            ce_r, leaves = batch_loss(params, lm_config, batch_r)
            return T.scale(ce_r, lam), leaves
        ce_f, leaves = batch_loss(params, lm_config, batch_f)
        loss = T.scale(ce_f, -forget_weight)
        if batch_r is not None:
            ids, sup, _ = _pad_batch(batch_r)
            targets, mask = _shifted_targets(ids, sup)
            ce_r = T.cross_entropy(lm.graph_logits(leaves, lm_config, ids), targets, mask)
            loss = T.add(loss, T.scale(ce_r, lam))
        return loss, leaves

    return _dual_set_descent(theta_D, lm_config, forget_set, retain_set, cfg, step_loss)


def npo_per_example_loss(
    params: dict,
    ref_params: dict,
    lm_config: lm.LmConfig,
    batch: list,
    npo_beta: float,
) -> tuple[T.Tensor, dict]:
    """Preference-ratio forget loss for one batch.

    Per example: (2 / beta) * log(1 + (p_theta(y|x) / p_ref(y|x))^beta),
    computed from sequence log-probabilities; equals (2 / beta) * log 2
    when the policy matches the frozen reference. Returns the mean over
    the batch and the parameter leaves.
    """
    ids, sup, _ = _pad_batch(batch)
    targets, mask = _shifted_targets(ids, sup)

    ref_tensors = {k: T.Tensor(v) for k, v in ref_params.items()}
    ref_lp = T.sequence_logprob_sums(lm.graph_logits(ref_tensors, lm_config, ids), targets, mask).data

    leaves = {k: T.Tensor(v, requires_grad=True) for k, v in params.items()}
    lp = T.sequence_logprob_sums(lm.graph_logits(leaves, lm_config, ids), targets, mask)
    ratio_log = T.add_const(lp, -ref_lp)
    loss = T.scale(T.mean_all(T.softplus(T.scale(ratio_log, npo_beta))), 2.0 / npo_beta)
    return loss, leaves


def npo_unlearn(
    theta_D: dict,
    forget_set: list,
    retain_set: list | None,
    npo_beta: float,
    lam: float,
    cfg: TrainConfig,
    lm_config: lm.LmConfig,
) -> dict:
    """Preference-ratio unlearning against a reference frozen at the
    target state, plus ``lam`` times a retain-subsample NLL."""
    if npo_beta <= 0:
        raise UnlearnError("npo_beta must be positive")
    ref_params = ckpt_mod.clone_state(theta_D)

    def step_loss(params, batch_f, batch_r):
        loss, leaves = npo_per_example_loss(params, ref_params, lm_config, batch_f, npo_beta)
        if batch_r is not None:
            ids, sup, _ = _pad_batch(batch_r)
            targets, mask = _shifted_targets(ids, sup)
            ce_r = T.cross_entropy(lm.graph_logits(leaves, lm_config, ids), targets, mask)
            loss = T.add(loss, T.scale(ce_r, lam))
        return loss, leaves

    return _dual_set_descent(theta_D, lm_config, forget_set, retain_set, cfg, step_loss)
