"""Experiment orchestration: pipelines, evaluation, sweeps, reports.

A pipeline builds the synthetic benchmark, trains the *target* model
through a list of stages (exactly one of which introduces the forget
data), trains the *ideal* reference through the same stages with the
forget data removed, and persists checkpoints plus a tokens-seen ledger
for both runs. Unlearning runs are then swept over their hyperparameter
grids, scored on a validation split, and the winner is reported on the
held-out test split relative to the ideal model.

Every artifact (datasets, checkpoints, manifests, reports) is a pure
function of the config, so rerunning any step reproduces its outputs
byte for byte. Checkpoint created_at fields are pinned to a constant for
the same reason.
"""

from __future__ import annotations

import hashlib
import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ckpt as ckpt_mod
from . import lm, metrics, synthbench, training, unlearn
from .ckpt import CheckpointRecord, Ledger
from .lm import LmConfig
from .metrics import EvalReport, JudgeCandidateSet
from .synthbench import Benchmark, BenchSpec, QaItem
from .training import TrainConfig, TrainExample
from .unlearn import BaselineConfig, MsaConfig

CREATED_AT = "1970-01-01T00:00:00+00:00"

UP_METRICS = frozenset({
    "acc_forget", "acc_recover", "acc_retain", "model_utility",
    "knowledge_mem_retain", "restor_accuracy",
})
DOWN_METRICS = frozenset({
    "extraction_strength", "rouge_forget", "knowledge_mem_forget",
    "exact_mem_forget", "verbatim_mem_forget", "min_k_auc", "min_k_pp_auc",
})
ZERO_METRICS = frozenset({"priv_leak"})


class ConfigError(ValueError):
    pass


class PipelineError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class StageSpec:
    stage_tag: str
    dataset: str
    train: TrainConfig
    ideal_dataset: str | None = None  # None: same data; "": stage skipped
    forget_stage: bool = False


@dataclass
class EvalSettings:
    k_percent: float = 20.0
    prefix_fraction: float = 0.5
    judge_threshold: float = 0.1
    max_new_tokens: int = 32
    es_max_len: int = 64
    score: str = "tofu"  # tofu | muse | restor
    # retain questions decoded per eval (seeded subsample; 0 = no cap)
    retain_eval_cap: int = 64
    val_retain_cap: int = 16


@dataclass
class ExperimentConfig:
    seed: int
    bench: BenchSpec
    model: LmConfig
    stages: list
    unlearn: dict
    eval: EvalSettings
    validation_fraction: float = 0.15
    sweep_grid: dict = field(default_factory=dict)

    def __post_init__(self):
        tags = [s.stage_tag for s in self.stages]
        if len(tags) != len(set(tags)):
            raise ConfigError(f"stage tags must be unique, got {tags}")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must be in (0, 1)")
        if sum(s.forget_stage for s in self.stages) > 1:
            raise ConfigError("at most one stage may carry the forget data")


def _train_config(obj: dict, fallback_seed: int) -> TrainConfig:
    allowed = {"learning_rate", "weight_decay", "epochs", "warmup_epochs", "batch_size",
               "seed", "checkpoint_every_tokens", "grad_clip_norm"}
    bad = set(obj) - allowed
    if bad:
        raise ConfigError(f"unknown train keys: {sorted(bad)}")
    obj = dict(obj)
    obj.setdefault("seed", fallback_seed)
    return TrainConfig(**obj)


def preset(name: str) -> dict:
    """Built-in pipeline shapes; config files select one and override.

    Author-forgetting pipelines train in two phases (a fast memorization
    stage and a low-rate polish stage on the same data) so the byte-level
    model pins its answers exactly; the polish stage is a second exposure
    to the forget data, which the checkpoint selection ignores because the
    vector checkpoint must precede the first exposure.
    """
    # vector extraction runs full-batch (one exact gradient step per epoch):
    # stochastic mini-batch noise in the extracted vectors is what erodes
    # unrelated byte margins when the vector is scaled into the target
    ft = {"learning_rate": 1e-3, "epochs": 16, "warmup_epochs": 1, "batch_size": 512}
    ft2nd = {"learning_rate": 2.5e-4, "epochs": 6, "warmup_epochs": 0, "batch_size": 512}
    base = {
        "seed": 0,
        "bench": {"n_entities": 64, "forget_fraction": 0.10, "holdout_fraction": 0.25,
                  "facts_per_entity": 5, "filler_tokens": 50_000},
        "model": {"d_model": 128, "n_layers": 2, "n_heads": 4, "d_ff": 512, "max_seq_len": 256},
        "eval": {"score": "tofu"},
        "split": {"validation_fraction": 0.15},
        "unlearn": {"method": "msa", "alpha": 0.625, "beta": 0.5, "use_retain": True,
                    "ft": ft, "ft2nd": ft2nd, "ft_repeat": 3},
        "sweep": {"alpha": [0.625, 0.75, 1.0, 1.25, 1.5, 3.0], "beta": [0.5, 0.75, 1.0]},
    }
    pretrain_stage = {"stage_tag": "pretrain", "dataset": "pretrain",
                      "train": {"learning_rate": 1e-3, "epochs": 1, "warmup_epochs": 1,
                                "batch_size": 32, "checkpoint_every_tokens": 16384}}
    world_stage = {"stage_tag": "world", "dataset": "world",
                   "train": {"learning_rate": 1e-3, "epochs": 40, "warmup_epochs": 1, "batch_size": 16}}
    world_polish = {"stage_tag": "world_polish", "dataset": "world",
                    "train": {"learning_rate": 2e-4, "epochs": 16, "warmup_epochs": 0, "batch_size": 16}}
    tofu_stage = {"stage_tag": "tofu", "dataset": "tofu", "ideal_dataset": "world",
                  "forget_stage": True,
                  "train": {"learning_rate": 1e-3, "epochs": 8, "warmup_epochs": 1, "batch_size": 16}}
    tofu_polish = {"stage_tag": "tofu_polish", "dataset": "tofu", "ideal_dataset": "world",
                   "train": {"learning_rate": 2.5e-4, "epochs": 3, "warmup_epochs": 0, "batch_size": 16}}
    c4_stage = {"stage_tag": "c4", "dataset": "filler_late",
                "train": {"learning_rate": 2.5e-4, "epochs": 1, "warmup_epochs": 0, "batch_size": 16}}
    trunk = [pretrain_stage, world_stage, world_polish]

    if name == "tofu":
        return {**base, "stages": trunk + [tofu_stage, tofu_polish]}
    if name == "tofu_c4":
        return {**base, "stages": trunk + [tofu_stage, tofu_polish, c4_stage]}
    if name == "tofu_c4_tofu":
        tofu2 = {"stage_tag": "tofu2", "dataset": "tofu", "ideal_dataset": "world",
                 "train": {"learning_rate": 2.5e-4, "epochs": 3, "warmup_epochs": 0, "batch_size": 16}}
        return {**base, "stages": trunk + [tofu_stage, tofu_polish, c4_stage, tofu2]}
    if name == "restor":
        return {
            **base,
            "bench": {"n_entities": 64, "forget_fraction": 0.0, "holdout_fraction": 0.25,
                      "facts_per_entity": 5, "filler_tokens": 50_000, "corrupt_fraction": 0.25},
            "eval": {"score": "restor"},
            "split": {"validation_fraction": 0.10},
            "unlearn": {"method": "msa", "alpha": 1.0, "beta": 0.0, "use_retain": False,
                        "ft": ft, "ft2nd": ft2nd, "ft_repeat": 1},
            "sweep": {"alpha": [0.75, 1.0, 1.5, 2.0], "beta": [0.0]},
            "stages": [
                {"stage_tag": "pretrain", "dataset": "restor_pretrain",
                 "train": {"learning_rate": 1e-3, "epochs": 30, "warmup_epochs": 1,
                           "batch_size": 16, "checkpoint_every_tokens": 262144}},
                {"stage_tag": "pretrain_polish", "dataset": "restor_pretrain",
                 "train": {"learning_rate": 2.5e-4, "epochs": 8, "warmup_epochs": 0, "batch_size": 16}},
                {"stage_tag": "corrupt", "dataset": "corrupt", "ideal_dataset": "",
                 "forget_stage": True,
                 "train": {"learning_rate": 1e-3, "epochs": 5, "warmup_epochs": 1, "batch_size": 16}},
            ],
        }
    raise ConfigError(f"unknown preset {name!r}")


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(obj: dict | str | Path, seed_override: int | None = None) -> ExperimentConfig:
    """Build an ExperimentConfig from a dict or a JSON file (with optional
    ``preset`` inheritance and a command-line seed override)."""
    if isinstance(obj, (str, Path)):
        try:
            obj = json.loads(Path(obj).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config: {e}") from e
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    if "preset" in obj:
        merged = _deep_merge(preset(obj["preset"]), {k: v for k, v in obj.items() if k != "preset"})
    else:
        merged = dict(obj)
    if seed_override is not None:
        merged["seed"] = seed_override
    try:
        seed = int(merged.get("seed", 0))
        bench = BenchSpec(seed=seed, **merged.get("bench", {}))
        model = LmConfig(seed=seed, **merged.get("model", {}))
        stages = []
        for s in merged.get("stages", []):
            stages.append(StageSpec(
                stage_tag=s["stage_tag"],
                dataset=s["dataset"],
                train=_train_config(s.get("train", {}), seed),
                ideal_dataset=s.get("ideal_dataset"),
                forget_stage=bool(s.get("forget_stage", False)),
            ))
        ev = EvalSettings(**merged.get("eval", {}))
        unl = dict(merged.get("unlearn", {}))
        split = merged.get("split", {})
        cfg = ExperimentConfig(
            seed=seed, bench=bench, model=model, stages=stages, unlearn=unl, eval=ev,
            validation_fraction=float(split.get("validation_fraction", 0.15)),
            sweep_grid=dict(merged.get("sweep", {})),
        )
    except (TypeError, ValueError, KeyError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from e
    if ev.score not in ("tofu", "muse", "restor"):
        raise ConfigError(f"unknown eval score {ev.score!r}")
    return cfg


def config_hash(config: ExperimentConfig) -> str:
    blob = json.dumps(_config_json(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _config_json(config: ExperimentConfig) -> dict:
    return {
        "seed": config.seed,
        "bench": config.bench.__dict__,
        "model": config.model.__dict__,
        "stages": [
            {"stage_tag": s.stage_tag, "dataset": s.dataset, "ideal_dataset": s.ideal_dataset,
             "forget_stage": s.forget_stage, "train": s.train.__dict__}
            for s in config.stages
        ],
        "unlearn": config.unlearn,
        "eval": config.eval.__dict__,
        "validation_fraction": config.validation_fraction,
        "sweep": config.sweep_grid,
    }


# ---------------------------------------------------------------------------
# datasets


def dataset_registry(bench: Benchmark, config: ExperimentConfig) -> dict:
    """Name -> list[TrainExample] map the stage specs refer to.

    Utility facts are oversampled in the entity stages (world knowledge is
    higher-frequency than any single author), which is what makes the
    utility pool a meaningful retention probe.
    """
    ex = training.examples_from
    utility = ex(docs=bench.docs["utility"], qa=bench.qa["utility"])
    forget_docs = ex(docs=bench.docs["forget"])
    forget_qa = ex(qa=bench.qa["forget"])
    entity_retain = ex(docs=bench.docs["retain"], qa=bench.qa["retain"])
    filler = ex(docs=bench.docs["filler"])
    late_filler = ex(docs=synthbench.gen_filler(config.seed + 4, max(1, config.bench.filler_tokens // 4)))
    world = entity_retain + utility * 5
    return {
        "pretrain": filler + utility,
        "world": world,
        # forget QA pairs are revisited more often than the docs so the
        # model binds answers as strongly as the long-trained retain world
        "tofu": forget_docs + forget_qa * 3 + world,
        "filler_late": late_filler,
        "restor_pretrain": forget_docs + forget_qa + world + filler,
        "corrupt": ex(docs=bench.docs["corrupt"]),
        "forget_only": forget_docs + forget_qa,
        # the retain pool mirrors the training mix (utility facts at their
        # oversampled frequency), so retain-vector subsamples repair them
        "retain_only": entity_retain + utility * 5,
    }


def forget_retain_sets(bench: Benchmark, config: ExperimentConfig,
                       registry: dict) -> tuple[list, list]:
    """The unlearning target set and the retain pool for vector extraction."""
    forget_stage = next((s for s in config.stages if s.forget_stage), None)
    if forget_stage is None:
        raise ConfigError("no stage is marked forget_stage")
    if forget_stage.dataset == "corrupt":
        return registry["corrupt"], registry["retain_only"]
    return registry["forget_only"], registry["retain_only"]


# ---------------------------------------------------------------------------
# pipeline


def run_pipeline(config: ExperimentConfig, out_dir: str | Path) -> dict:
    """Generate data, train target and ideal models, persist everything.

    Returns the manifest (also written to ``out/manifest.json``).
    """
    out_dir = Path(out_dir)
    bench = generate(config, out_dir)
    manifest = train_runs(config, out_dir, bench)
    return manifest


def generate(config: ExperimentConfig, out_dir: str | Path) -> Benchmark:
    out_dir = Path(out_dir)
    bench = synthbench.build_benchmark(config.bench)
    data_dir = out_dir / "data"
    synthbench.save_benchmark(bench, data_dir)
    return bench


def _stage_plan(config: ExperimentConfig) -> tuple[int, list]:
    """Index of the first stage where the ideal run diverges, plus stages."""
    stages = config.stages
    for i, s in enumerate(stages):
        if s.ideal_dataset is not None and s.ideal_dataset != s.dataset:
            return i, stages
    return len(stages), stages


def train_runs(config: ExperimentConfig, out_dir: str | Path, bench: Benchmark | None = None) -> dict:
    out_dir = Path(out_dir)
    if bench is None:
        bench = generate(config, out_dir)
    registry = dataset_registry(bench, config)
    for s in config.stages:
        if s.dataset not in registry or (s.ideal_dataset not in (None, "") and s.ideal_dataset not in registry):
            raise ConfigError(f"stage {s.stage_tag!r} references unknown dataset")

    diverge_at, stages = _stage_plan(config)
    model0 = lm.build_model(config.model)

    def fresh_dir(run_id: str) -> tuple:
        run_dir = out_dir / run_id
        run_dir.mkdir(parents=True, exist_ok=True)
        for old in sorted(run_dir.glob("*.msck")) + [run_dir / "ledger.jsonl"]:
            if old.exists():
                old.unlink()
        return run_dir, Ledger.open(run_dir / "ledger.jsonl")

    def run(run_id: str, plan: list, start_params: dict, tokens: int, step: int,
            prefix_boundaries: list) -> tuple[dict, list]:
        run_dir, ledger = fresh_dir(run_id)
        boundaries = []
        for tag, snap_params, snap_tokens, snap_step in prefix_boundaries:
            rec = CheckpointRecord(params=snap_params, tokens_seen=snap_tokens, step=snap_step,
                                   run_id=run_id, stage_tag=tag, created_at=CREATED_AT)
            path = run_dir / f"{run_id}_{tag}_{snap_tokens:012d}.msck"
            ckpt_mod.save(rec, path)
            ledger.append(rec, path)
            boundaries.append({"stage_tag": tag, "tokens_seen": snap_tokens, "step": snap_step})
        params = ckpt_mod.clone_state(start_params)
        snapshots = []
        for stage, dataset in plan:
            if dataset is None:
                continue
            model, records = training.finetune(
                params, config.model, dataset, stage.train,
                tokens_seen_start=tokens, step_start=step,
                run_id=run_id, stage_tag=stage.stage_tag, created_at=CREATED_AT,
                ledger=ledger, ckpt_dir=run_dir,
            )
            params = model.params
            tokens = records[-1].tokens_seen
            step = records[-1].step
            boundaries.append({"stage_tag": stage.stage_tag, "tokens_seen": tokens, "step": step})
            snapshots.append((stage.stage_tag, ckpt_mod.clone_state(params), tokens, step))
        return params, boundaries, snapshots

    # the ideal run shares every stage before the forget data appears, so it
    # branches from the target's snapshot at the divergence point (training
    # is bit-deterministic, so this equals rerunning the shared prefix)
    target_plan = [(s, registry[s.dataset]) for s in stages]
    target_params, target_bounds, target_snaps = run("target", target_plan, model0.params, 0, 0, [])

    ideal_plan = [(s, (registry[s.ideal_dataset] if s.ideal_dataset else None)
                  if s.ideal_dataset is not None else registry[s.dataset])
                  for s in stages[diverge_at:]]
    if diverge_at > 0:
        shared = target_snaps[:diverge_at]
        start = shared[-1][1]
        tokens0, step0 = shared[-1][2], shared[-1][3]
    else:
        shared, start, tokens0, step0 = [], model0.params, 0, 0
    ideal_params, ideal_bounds, _ = run("ideal", ideal_plan, start, tokens0, step0, shared)

    forget_index = next(i for i, s in enumerate(stages) if s.forget_stage)
    trunk_tokens = target_bounds[forget_index - 1]["tokens_seen"] if forget_index > 0 else 0

    ideal_outputs = decode_outputs(
        lm.LmModel(params=ideal_params, config=config.model),
        bench.qa["forget"] + bench.qa["retain"],
        config.eval.max_new_tokens,
    )
    io_path = Path(out_dir) / "ideal_outputs.jsonl"
    with open(io_path, "w") as fh:
        for q in sorted(ideal_outputs):
            fh.write(json.dumps({"output": ideal_outputs[q], "question": q},
                                sort_keys=True, separators=(",", ":")) + "\n")

    data_files = {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
                  for p in sorted((out_dir / "data").glob("*.jsonl"))}
    manifest = {
        "config": _config_json(config),
        "config_hash": config_hash(config),
        "data_hashes": data_files,
        "ideal_stages": ideal_bounds,
        "pre_forget_tokens": trunk_tokens,
        "seed": config.seed,
        "stage_tags": [s.stage_tag for s in stages],
        "target_stages": target_bounds,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return manifest


def decode_outputs(model, qa_items: list, max_new_tokens: int) -> dict:
    """question -> greedy answer text, batched."""
    prefixes = [lm.encode(synthbench.qa_prompt(q.question)) for q in qa_items]
    outs = lm.greedy_decode_batch(model, prefixes, max_new_tokens)
    return {q.question: lm.decode(o).strip() for q, o in zip(qa_items, outs)}


# ---------------------------------------------------------------------------
# evaluation


def split_eval(qa_set: list, fraction: float, seed: int) -> tuple[list, list]:
    """Disjoint (validation, test) split, stratified by split_tag."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError("fraction must be in (0, 1)")
    by_tag: dict[str, list] = {}
    for item in qa_set:
        by_tag.setdefault(item.split_tag, []).append(item)
    val, test = [], []
    rng = np.random.default_rng(seed)
    for tag in sorted(by_tag):
        group = by_tag[tag]
        order = rng.permutation(len(group))
        n_val = int(fraction * len(group))
        if n_val == 0 and len(group) >= 2:
            n_val = 1
        val.extend(group[i] for i in order[:n_val])
        test.extend(group[i] for i in order[n_val:])
    return val, test


@dataclass
class SplitBundle:
    """Everything evaluate_model needs for one split."""

    name: str
    forget_qa: list
    retain_qa: list
    utility_qa: list
    forget_seqs: list
    holdout_seqs: list
    candidate_sets: dict  # question -> JudgeCandidateSet
    restor_qa: list = field(default_factory=list)


@dataclass
class EvalBundle:
    validation: SplitBundle
    test: SplitBundle
    settings: EvalSettings
    seed: int


def _doc_sequences(docs: list, es_max_len: int) -> list:
    return [lm.encode(d.text)[:es_max_len] for d in docs]


def build_eval_bundle(config: ExperimentConfig, bench: Benchmark, ideal_outputs: dict) -> EvalBundle:
    ev = config.eval
    frac, seed = config.validation_fraction, config.seed

    fq_val, fq_test = split_eval(bench.qa["forget"], frac, seed) if bench.qa["forget"] else ([], [])
    rq_val, rq_test = split_eval(bench.qa["retain"], frac, seed + 1)
    fd_val, fd_test = split_eval(bench.docs["forget"], frac, seed + 2) if bench.docs["forget"] else ([], [])
    hd_val, hd_test = split_eval(bench.docs["holdout"], frac, seed + 3)

    def cap(items, n, sub_seed):
        if n <= 0 or len(items) <= n:
            return items
        order = np.random.default_rng(sub_seed).permutation(len(items))
        return [items[i] for i in sorted(order[:n])]

    rq_val = cap(rq_val, ev.val_retain_cap, seed + 7)
    rq_test = cap(rq_test, ev.retain_eval_cap, seed + 8)

    restor_val, restor_test = [], []
    if any(s.dataset == "corrupt" and s.forget_stage for s in config.stages):
        corrupted_ids = {eid for eid, _ in bench.corruption_map}
        original_qa = [q for tag in ("forget", "retain") for q in bench.qa[tag]
                       if q.entity_id in corrupted_ids]
        restor_val, restor_test = split_eval(original_qa, frac, seed + 5)
        if bench.docs["corrupt"]:
            fd_val, fd_test = split_eval(bench.docs["corrupt"], frac, seed + 6)

    def candidates(qa_items: list) -> dict:
        sets = {}
        for q in qa_items:
            shuffle_seed = (zlib.crc32(q.question.encode()) ^ seed) & 0x7FFFFFFF
            sets[q.question] = JudgeCandidateSet(
                ideal_output=ideal_outputs.get(q.question, ""),
                ground_truth=q.answer,
                perturbed=list(q.perturbed_answers),
                seed=shuffle_seed,
            )
        return sets

    def bundle(name, fq, rq, fd, hd, restor_q):
        return SplitBundle(
            name=name,
            forget_qa=fq,
            retain_qa=rq,
            utility_qa=list(bench.qa["utility"]),
            forget_seqs=_doc_sequences(fd, ev.es_max_len),
            holdout_seqs=_doc_sequences(hd, ev.es_max_len),
            candidate_sets=candidates(fq + rq),
            restor_qa=restor_q,
        )

    return EvalBundle(
        validation=bundle("validation", fq_val, rq_val, fd_val, hd_val, restor_val),
        test=bundle("test", fq_test, rq_test, fd_test, hd_test, restor_test),
        settings=ev,
        seed=seed,
    )


def evaluate_model(params: dict, config: ExperimentConfig, bundle: EvalBundle,
                   split: str, model_id: str) -> EvalReport:
    """All applicable metrics for one model state on one split."""
    sb: SplitBundle = getattr(bundle, split)
    ev = bundle.settings
    model = lm.LmModel(params=params, config=config.model)
    vals: dict[str, float] = {}

    if sb.forget_qa:
        outs = decode_outputs(model, sb.forget_qa, ev.max_new_tokens)
        f_outs = [outs[q.question] for q in sb.forget_qa]
        f_sets = [sb.candidate_sets[q.question] for q in sb.forget_qa]
        vals["acc_forget"] = metrics.acc_forget(f_outs, f_sets, ev.judge_threshold)
        vals["acc_recover"] = metrics.acc_recover(f_outs, f_sets, ev.judge_threshold)
        vals["rouge_forget"] = float(np.mean([
            metrics.rouge_l(o, q.answer) for o, q in zip(f_outs, sb.forget_qa)
        ]))
        vals["knowledge_mem_forget"] = float(np.mean([
            metrics.rouge_l(o, q.answer) for o, q in zip(f_outs, sb.forget_qa)
        ]))

    if sb.retain_qa:
        outs = decode_outputs(model, sb.retain_qa, ev.max_new_tokens)
        r_outs = [outs[q.question] for q in sb.retain_qa]
        r_sets = [sb.candidate_sets[q.question] for q in sb.retain_qa]
        vals["acc_retain"] = metrics.acc_retain(r_outs, r_sets, ev.judge_threshold)
        vals["knowledge_mem_retain"] = float(np.mean([
            metrics.rouge_l(o, q.answer) for o, q in zip(r_outs, sb.retain_qa)
        ]))

    if sb.forget_seqs:
        vals["extraction_strength"] = metrics.extraction_strength(model, sb.forget_seqs)
        vals["exact_mem_forget"] = metrics.exact_memorization(model, sb.forget_seqs, ev.prefix_fraction)
        vals["verbatim_mem_forget"] = metrics.verbatim_memorization(model, sb.forget_seqs, ev.prefix_fraction)
        member = [metrics.min_k(model, s, ev.k_percent) for s in sb.forget_seqs]
        nonmember = [metrics.min_k(model, s, ev.k_percent) for s in sb.holdout_seqs]
        vals["min_k_auc"] = metrics.mia_auc(member, nonmember)
        member_pp = [metrics.min_k_pp(model, s, ev.k_percent) for s in sb.forget_seqs]
        nonmember_pp = [metrics.min_k_pp(model, s, ev.k_percent) for s in sb.holdout_seqs]
        vals["min_k_pp_auc"] = metrics.mia_auc(member_pp, nonmember_pp)

    vals["model_utility"] = metrics.model_utility(model, sb.utility_qa, ev.max_new_tokens)

    if sb.restor_qa:
        outs = decode_outputs(model, sb.restor_qa, ev.max_new_tokens)
        vals["restor_accuracy"] = float(np.mean([
            metrics.normalize_tokens(outs[q.question]) == metrics.normalize_tokens(q.answer)
            for q in sb.restor_qa
        ]))

    sizes = {"forget_qa": len(sb.forget_qa), "retain_qa": len(sb.retain_qa),
             "utility_qa": len(sb.utility_qa), "forget_seqs": len(sb.forget_seqs),
             "holdout_seqs": len(sb.holdout_seqs), "restor_qa": len(sb.restor_qa)}
    return EvalReport(model_id=model_id, metrics=vals, split_sizes=sizes,
                      seeds={"config": bundle.seed, "split": split == "test"})


# ---------------------------------------------------------------------------
# validation scores


def _check_unit_interval(values: dict) -> None:
    bad = {k: v for k, v in values.items() if not (0.0 <= v <= 1.0)}
    if bad:
        raise metrics.MetricError(f"metrics outside [0, 1]: {bad}")


def validation_score_tofu(m: dict) -> float:
    """Geometric-mean-style selection score for author-forgetting runs:

        exp( MU^2 * Acc_f * Acc_rec^2 * Acc_ret * (1 - ES)^2 / 8 )

    Lives in [1, e^(1/8)]; any zero factor collapses the exponent to 0.
    """
    picked = {k: m[k] for k in ("model_utility", "acc_forget", "acc_recover",
                                "acc_retain", "extraction_strength")}
    _check_unit_interval(picked)
    expo = (
        picked["model_utility"] ** 2
        * picked["acc_forget"]
        * picked["acc_recover"] ** 2
        * picked["acc_retain"]
        * (1.0 - picked["extraction_strength"]) ** 2
    ) / 8.0
    return math.exp(expo)


def validation_score_muse(m: dict) -> float:
    """Selection score for memorization-centric runs:

        exp( (1-MinK)(1-MinK++)(1-VerbMem_f)(1-KnowMem_r)^2 (1-ES)^2 (1-ExactMem) / 8 )
    """
    picked = {k: m[k] for k in ("min_k_auc", "min_k_pp_auc", "verbatim_mem_forget",
                                "knowledge_mem_retain", "extraction_strength", "exact_mem_forget")}
    _check_unit_interval(picked)
    expo = (
        (1.0 - picked["min_k_auc"])
        * (1.0 - picked["min_k_pp_auc"])
        * (1.0 - picked["verbatim_mem_forget"])
        * (1.0 - picked["knowledge_mem_retain"]) ** 2
        * (1.0 - picked["extraction_strength"]) ** 2
        * (1.0 - picked["exact_mem_forget"])
    ) / 8.0
    return math.exp(expo)


def validation_score(kind: str, m: dict) -> float:
    if kind == "tofu":
        return validation_score_tofu(m)
    if kind == "muse":
        return validation_score_muse(m)
    if kind == "restor":
        return m["restor_accuracy"]
    raise ConfigError(f"unknown score kind {kind!r}")


# ---------------------------------------------------------------------------
# unlearn + sweep


@dataclass
class PipelineArtifacts:
    """Loaded state of a finished pipeline directory."""

    config: ExperimentConfig
    out_dir: Path
    bench: Benchmark
    target: dict
    ideal: dict
    target_ledger: Ledger
    bundle: EvalBundle
    forget_set: list
    retain_set: list
    pre_forget_tokens: int


def load_artifacts(config: ExperimentConfig, out_dir: str | Path) -> PipelineArtifacts:
    out_dir = Path(out_dir)
    manifest_path = out_dir / "manifest.json"
    if not manifest_path.exists():
        raise PipelineError(f"no manifest in {out_dir}; run the pipeline first")
    manifest = json.loads(manifest_path.read_text())
    bench = synthbench.build_benchmark(config.bench)
    registry = dataset_registry(bench, config)
    forget_set, retain_set = forget_retain_sets(bench, config, registry)

    target_ledger = Ledger.open(out_dir / "target" / "ledger.jsonl")
    target = ckpt_mod.load(target_ledger.resolve(target_ledger.entries[-1])).params
    ideal_ledger = Ledger.open(out_dir / "ideal" / "ledger.jsonl")
    ideal = ckpt_mod.load(ideal_ledger.resolve(ideal_ledger.entries[-1])).params

    ideal_outputs = {}
    io_path = out_dir / "ideal_outputs.jsonl"
    if io_path.exists():
        for line in io_path.read_text().splitlines():
            row = json.loads(line)
            ideal_outputs[row["question"]] = row["output"]

    bundle = build_eval_bundle(config, bench, ideal_outputs)
    return PipelineArtifacts(
        config=config, out_dir=out_dir, bench=bench, target=target, ideal=ideal,
        target_ledger=target_ledger, bundle=bundle, forget_set=forget_set,
        retain_set=retain_set, pre_forget_tokens=int(manifest["pre_forget_tokens"]),
    )


def _unlearn_ft(art: "PipelineArtifacts") -> dict:
    u = art.config.unlearn
    return {
        "ft": _train_config(u.get("ft", {}), art.config.seed),
        "ft2nd": _train_config(u["ft2nd"], art.config.seed) if u.get("ft2nd") else None,
        "ft_repeat": int(u.get("ft_repeat", 1)),
        "retain_from": u.get("retain_from", "checkpoint"),
    }


def _msa_config(art: PipelineArtifacts, alpha: float, beta: float,
                checkpoint_tokens: int | None = None) -> MsaConfig:
    u = art.config.unlearn
    ref = checkpoint_tokens if checkpoint_tokens is not None else u.get("checkpoint_tokens")
    if ref is None:
        ref = art.pre_forget_tokens
    return MsaConfig(alpha=alpha, beta=beta, checkpoint_ref=int(ref), **_unlearn_ft(art))


def run_unlearn(art: PipelineArtifacts, method: str | None = None,
                alpha: float | None = None, beta: float | None = None,
                checkpoint_tokens: int | None = None) -> dict:
    """One unlearning run with the configured method and scales."""
    u = art.config.unlearn
    method = method or u.get("method", "msa")
    alpha = u.get("alpha", 1.0) if alpha is None else alpha
    beta = u.get("beta", 0.0) if beta is None else beta
    retain = art.retain_set if u.get("use_retain", True) else None
    ft = _train_config(u.get("ft", {}), art.config.seed)

    if method == "msa":
        cfg = _msa_config(art, alpha, beta, checkpoint_tokens)
        return unlearn.msa_unlearn(art.target, art.target_ledger, art.forget_set,
                                   retain, cfg, art.config.model)
    if method == "task_vector":
        cfg = MsaConfig(alpha=alpha, beta=beta,
                        checkpoint_ref=CheckpointRecord(params=art.target, stage_tag="target"),
                        **_unlearn_ft(art))
        return unlearn.msa_unlearn(art.target, None, art.forget_set, retain, cfg, art.config.model)
    if method == "grad_diff":
        return unlearn.grad_diff_unlearn(art.target, art.forget_set, retain or art.retain_set,
                                         u.get("lambda_retain", 1.0), ft, art.config.model)
    if method == "npo":
        return unlearn.npo_unlearn(art.target, art.forget_set, retain or art.retain_set,
                                   u.get("npo_beta", 0.1), u.get("lambda_retain", 1.0),
                                   ft, art.config.model)
    if method == "npo_lifted":
        base = unlearn.resolve_checkpoint(
            checkpoint_tokens if checkpoint_tokens is not None else art.pre_forget_tokens,
            art.target_ledger)
        tuned = unlearn.npo_unlearn(base.params, art.forget_set, retain or art.retain_set,
                                    u.get("npo_beta", 0.1), u.get("lambda_retain", 1.0),
                                    ft, art.config.model)
        return unlearn.lift_update(art.target, base.params, tuned, u.get("lift_alpha", alpha))
    raise ConfigError(f"unknown unlearn method {method!r}")


def sweep(art: PipelineArtifacts, grid: dict | None = None, method: str = "msa",
          checkpoint_tokens: int | None = None) -> dict:
    """Evaluate every grid point on the validation split, pick the best
    validation score (ties to the smaller alpha, then beta), and report the
    winner on the test split.

    Vector methods share one extraction per checkpoint; only the merge
    scales vary across the grid.
    """
    grid = grid if grid is not None else art.config.sweep_grid
    alphas = sorted(grid.get("alpha", [art.config.unlearn.get("alpha", 1.0)]))
    betas = sorted(grid.get("beta", [art.config.unlearn.get("beta", 0.0)]))
    if not alphas or not betas:
        raise ConfigError("sweep grid is empty")
    use_retain = art.config.unlearn.get("use_retain", True) and any(b != 0 for b in betas)
    retain = art.retain_set if use_retain else None
    score_kind = art.config.eval.score

    if method in ("msa", "task_vector"):
        if method == "msa":
            cfg0 = _msa_config(art, alphas[0], betas[0], checkpoint_tokens)
            checkpoint = unlearn.resolve_checkpoint(cfg0.checkpoint_ref, art.target_ledger)
        else:
            cfg0 = MsaConfig(alpha=alphas[0], beta=betas[0],
                             checkpoint_ref=CheckpointRecord(params=art.target, stage_tag="target"),
                             **_unlearn_ft(art))
            checkpoint = cfg0.checkpoint_ref
        theta_f, theta_r = unlearn.extract_vectors(
            checkpoint, art.config.model, art.forget_set, retain, cfg0)

        def candidate(alpha, beta):
            return unlearn.merge_vectors(art.target, theta_f, alpha, theta_r, beta)
    else:
        def candidate(alpha, beta):
            return run_unlearn(art, method=method, alpha=alpha, beta=beta,
                               checkpoint_tokens=checkpoint_tokens)

    leaderboard = []
    best = None
    for alpha in alphas:
        for beta in betas:
            params = candidate(alpha, beta)
            rep = evaluate_model(params, art.config, art.bundle, "validation",
                                 f"{method}_a{alpha:g}_b{beta:g}")
            score = validation_score(score_kind, rep.metrics)
            leaderboard.append({"alpha": alpha, "beta": beta, "score": score,
                                **{f"val_{k}": v for k, v in sorted(rep.metrics.items())}})
            if best is None or score > best["score"]:
                best = {"alpha": alpha, "beta": beta, "score": score, "params": params}

    final = evaluate_model(best["params"], art.config, art.bundle, "test", f"{method}_swept")
    return {
        "method": method,
        "best_alpha": best["alpha"],
        "best_beta": best["beta"],
        "best_score": best["score"],
        "leaderboard": leaderboard,
        "test_report": final,
        "best_params": best["params"],
    }


# ---------------------------------------------------------------------------
# reporting


def _direction(metric: str) -> str:
    if metric in UP_METRICS:
        return "up"
    if metric in DOWN_METRICS:
        return "down"
    return "zero"


def _meets_ideal(value: float, ideal: float, direction: str) -> bool:
    return value >= ideal if direction == "up" else value <= ideal


def report_table(reports: list[EvalReport]) -> tuple[list[str], list[list[str]]]:
    """Value-plus-ratio table relative to the ideal model.

    A method cell shows "+100%" when it matches or exceeds the ideal in the
    metric's good direction. Otherwise the ratio reference is the ideal if
    at least one method reached it, else the best-performing method, and
    the cell shows the percentage toward that reference (for downward
    metrics the ratio is reference/value).
    """
    ids = [r.model_id for r in reports]
    if "ideal" not in ids:
        raise PipelineError("report needs an 'ideal' row")
    ideal = next(r for r in reports if r.model_id == "ideal")
    method_rows = [r for r in reports if r.model_id not in ("ideal", "target")]
    all_metrics = sorted({k for r in reports for k in r.metrics})

    header = ["model"] + all_metrics
    rows = []
    refs: dict[str, float | None] = {}
    for met in all_metrics:
        d = _direction(met)
        if d == "zero" or met not in ideal.metrics:
            refs[met] = None
            continue
        vals = [r.metrics[met] for r in method_rows if met in r.metrics]
        if not vals:
            refs[met] = None
        elif any(_meets_ideal(v, ideal.metrics[met], d) for v in vals):
            refs[met] = ideal.metrics[met]
        else:
            refs[met] = max(vals) if d == "up" else min(vals)

    for r in reports:
        cells = [r.model_id]
        for met in all_metrics:
            if met not in r.metrics:
                cells.append("")
                continue
            v = r.metrics[met]
            d = _direction(met)
            if r.model_id in ("ideal", "target") or d == "zero" or refs[met] is None:
                cells.append(f"{v:.4f}")
                continue
            if _meets_ideal(v, ideal.metrics[met], d):
                cells.append(f"{v:.4f} (+100%)")
            else:
                ref = refs[met]
                ratio = (v / ref) if d == "up" else (ref / v if v != 0 else 0.0)
                cells.append(f"{v:.4f} ({100.0 * ratio:.1f}%)")
        rows.append(cells)
    return header, rows


def write_report_files(reports: list[EvalReport], out_dir: str | Path) -> tuple[Path, Path]:
    """summary.csv (RFC-4180) and summary.md, byte-deterministic."""
    import csv as _csv

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    header, rows = report_table(reports)
    csv_path = out_dir / "summary.csv"
    with open(csv_path, "w", newline="") as fh:
        w = _csv.writer(fh, quoting=_csv.QUOTE_MINIMAL)
        w.writerow(header)
        w.writerows(rows)
    md_path = out_dir / "summary.md"
    with open(md_path, "w") as fh:
        fh.write("| " + " | ".join(header) + " |\n")
        fh.write("|" + "---|" * len(header) + "\n")
        for row in rows:
            fh.write("| " + " | ".join(row) + " |\n")
    return csv_path, md_path
