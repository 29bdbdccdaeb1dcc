"""Evaluation metrics for unlearning experiments.

Three families:

* judge metrics: a deterministic token-overlap judge picks which candidate
  answer (ideal model output, ground truth, or perturbed alternatives) is
  most similar to the model's output; forget/recover/retain accuracies are
  derived from those selections. The judge is a stand-in for an external
  LLM judge and is exposed behind the same candidate-set interface.
* memorization metrics: extraction strength (shortest prefix from which
  greedy decoding regenerates the rest of a sequence), exact / verbatim /
  knowledge memorization, and sequence-overlap ROUGE-L.
* membership inference: lowest-k% token log-probability scores (raw and
  vocabulary-normalized), the Mann-Whitney AUC separating members from
  non-members, and the signed privacy-leakage percentage relative to a
  retrained reference.

All metrics are pure functions of immutable models and datasets.
"""

from __future__ import annotations

import csv
import json
import math
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import lm
from .synthbench import qa_prompt

NONE_SELECTION = None  # judge verdict when nothing is similar enough
JUDGE_F1_THRESHOLD = 0.1
SIGMA_FLOOR = 1e-6

_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})


class MetricError(ValueError):
    pass


def normalize_tokens(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return text.lower().translate(_PUNCT_TABLE).split()


# ---------------------------------------------------------------------------
# text overlap


def _lcs_len(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> float:
    """LCS-based F1 over normalized word tokens.

    0.0 when the candidate is empty or shares no subsequence; an empty
    reference is a caller error.
    """
    ref = normalize_tokens(reference)
    if not ref:
        raise MetricError("reference must be non-empty")
    cand = normalize_tokens(candidate)
    lcs = _lcs_len(cand, ref)
    if lcs == 0:
        return 0.0
    p = lcs / len(cand)
    r = lcs / len(ref)
    return 2 * p * r / (p + r)


def token_f1(a: str, b: str) -> float:
    """Bag-of-tokens F1 between two normalized strings."""
    ta, tb = normalize_tokens(a), normalize_tokens(b)
    if not ta or not tb:
        return 0.0
    common = 0
    counts: dict[str, int] = {}
    for x in ta:
        counts[x] = counts.get(x, 0) + 1
    for y in tb:
        if counts.get(y, 0) > 0:
            counts[y] -= 1
            common += 1
    if common == 0:
        return 0.0
    p = common / len(ta)
    r = common / len(tb)
    return 2 * p * r / (p + r)


# ---------------------------------------------------------------------------
# judge


@dataclass
class JudgeCandidateSet:
    """Candidates for one question, shuffled once with a seeded permutation.

    ``shuffled`` holds (role, text) pairs where role is "ideal",
    "ground_truth", or "perturbed:<i>"; the permutation is kept for audit.
    """

    ideal_output: str
    ground_truth: str
    perturbed: list
    seed: int = 0
    shuffled: list = field(init=False)
    permutation: list = field(init=False)

    def __post_init__(self):
        roles = [("ideal", self.ideal_output), ("ground_truth", self.ground_truth)]
        roles += [(f"perturbed:{i}", p) for i, p in enumerate(self.perturbed)]
        if len(roles) < 2:
            raise MetricError("need at least two candidates")
        perm = np.random.default_rng(self.seed).permutation(len(roles))
        self.permutation = [int(i) for i in perm]
        self.shuffled = [roles[i] for i in self.permutation]

    def role_at(self, index: int) -> str:
        return self.shuffled[index][0]


def judge_select(model_output: str, candidates: JudgeCandidateSet,
                 threshold: float = JUDGE_F1_THRESHOLD):
    """Pick the candidate most similar to the output by token F1.

    Ties go to the earliest index in the shuffled order; when the best F1
    falls below ``threshold`` nothing is selected (returns None).
    """
    scores = [token_f1(model_output, text) for _, text in candidates.shuffled]
    best = int(np.argmax(scores))
    if scores[best] < threshold:
        return NONE_SELECTION
    return best


def _selection_roles(outputs: list[str], candidate_sets: list[JudgeCandidateSet],
                     threshold: float = JUDGE_F1_THRESHOLD) -> list:
    if len(outputs) != len(candidate_sets):
        raise MetricError("outputs and candidate sets must align")
    if not outputs:
        raise MetricError("no questions to judge")
    roles = []
    for out, cs in zip(outputs, candidate_sets):
        sel = judge_select(out, cs, threshold)
        roles.append(None if sel is None else cs.role_at(sel))
    return roles


def acc_forget(outputs: list[str], candidate_sets: list[JudgeCandidateSet],
               threshold: float = JUDGE_F1_THRESHOLD) -> float:
    """Fraction of forget questions whose output is NOT judged closest to
    the ground truth (no selection counts as forgotten)."""
    roles = _selection_roles(outputs, candidate_sets, threshold)
    return float(np.mean([r != "ground_truth" for r in roles]))


def acc_recover(outputs: list[str], candidate_sets: list[JudgeCandidateSet],
                threshold: float = JUDGE_F1_THRESHOLD) -> float:
    """Fraction of forget questions whose output is judged closest to the
    ideal (retrained) model's output."""
    roles = _selection_roles(outputs, candidate_sets, threshold)
    return float(np.mean([r == "ideal" for r in roles]))


def acc_retain(outputs: list[str], candidate_sets: list[JudgeCandidateSet],
               threshold: float = JUDGE_F1_THRESHOLD) -> float:
    """Fraction of retain questions whose output is judged closest to the
    ideal output or the ground truth."""
    roles = _selection_roles(outputs, candidate_sets, threshold)
    return float(np.mean([r in ("ideal", "ground_truth") for r in roles]))


# ---------------------------------------------------------------------------
# memorization


def _teacher_forced_argmax(model, seq: list[int]) -> np.ndarray:
    """argmax next-token prediction at every position, one forward pass."""
    logits = lm.forward(model, seq)
    return np.argmax(logits, axis=-1)


def extraction_strength_one(model, seq: list[int]) -> float:
    """1 - k*/|s| where k* is the shortest prefix length from which greedy
    decoding exactly regenerates the remaining tokens; 0 when no prefix of
    length <= |s|-1 works.

    Greedy decoding from prefix k reproduces s[k:] exactly when the
    teacher-forced argmax matches s at every position >= k (matching
    continuations keep the context on the true sequence, and a first
    mismatch breaks equality either way), so a single forward pass suffices.
    The sequence must not contain the end-of-text id, which would stop
    decoding early and break that equivalence.
    """
    n = len(seq)
    if n < 2:
        raise MetricError("extraction strength needs sequences of length >= 2")
    if lm.EOT_ID in seq:
        raise MetricError("sequences must not contain the end-of-text id")
    preds = _teacher_forced_argmax(model, seq)
    mismatches = [t for t in range(1, n) if preds[t - 1] != seq[t]]
    k_star = 1 if not mismatches else mismatches[-1] + 1
    if k_star > n - 1:
        return 0.0
    return 1.0 - k_star / n


def extraction_strength(model, sequences: list) -> float:
    if not sequences:
        raise MetricError("no sequences")
    return float(np.mean([extraction_strength_one(model, list(s)) for s in sequences]))


def extraction_strength_brute(model, seq: list[int]) -> float:
    """Literal definition by repeated greedy decoding (test oracle)."""
    n = len(seq)
    for k in range(1, n):
        if lm.greedy_decode(model, seq[:k], n - k) == list(seq[k:]):
            return 1.0 - k / n
    return 0.0


def _prefix_len(n: int, prefix_fraction: float) -> int:
    return max(1, int(prefix_fraction * n))


def exact_memorization(model, sequences: list, prefix_fraction: float = 0.5) -> float:
    """Teacher-forced fraction of suffix positions predicted exactly."""
    fracs = []
    for s in sequences:
        s = list(s)
        p = _prefix_len(len(s), prefix_fraction)
        if p >= len(s):
            continue
        preds = _teacher_forced_argmax(model, s)
        hits = [int(preds[t - 1] == s[t]) for t in range(p, len(s))]
        fracs.append(float(np.mean(hits)))
    if not fracs:
        raise MetricError("all sequences were shorter than their prefix")
    return float(np.mean(fracs))


def verbatim_memorization(model, sequences: list, prefix_fraction: float = 0.5) -> float:
    """ROUGE-L between greedy continuations and the true suffixes."""
    prefixes, suffixes = [], []
    for s in sequences:
        s = list(s)
        p = _prefix_len(len(s), prefix_fraction)
        if p >= len(s):
            continue
        prefixes.append(s[:p])
        suffixes.append(s[p:])
    if not prefixes:
        raise MetricError("all sequences were shorter than their prefix")
    conts = lm.greedy_decode_batch(model, prefixes, max(len(s) for s in suffixes))
    scores = []
    for cont, suffix in zip(conts, suffixes):
        ref = lm.decode(suffix)
        if not normalize_tokens(ref):
            continue
        scores.append(rouge_l(lm.decode(cont), ref))
    if not scores:
        raise MetricError("no scorable suffixes")
    return float(np.mean(scores))


def knowledge_memorization(model, qa_set: list, max_new_tokens: int = 48) -> float:
    """Mean ROUGE-L of greedy answers against gold answers."""
    if not qa_set:
        raise MetricError("empty QA set")
    prefixes = [lm.encode(qa_prompt(q.question)) for q in qa_set]
    outs = lm.greedy_decode_batch(model, prefixes, max_new_tokens)
    return float(np.mean([rouge_l(lm.decode(o), q.answer) for o, q in zip(outs, qa_set)]))


def model_utility(model, utility_qa: list, max_new_tokens: int = 48) -> float:
    """Harmonic mean of per-question answer ROUGE-L, floored at 1e-6."""
    if not utility_qa:
        raise MetricError("empty utility set")
    prefixes = [lm.encode(qa_prompt(q.question)) for q in utility_qa]
    outs = lm.greedy_decode_batch(model, prefixes, max_new_tokens)
    scores = [max(rouge_l(lm.decode(o), q.answer), 1e-6) for o, q in zip(outs, utility_qa)]
    return len(scores) / sum(1.0 / s for s in scores)


# ---------------------------------------------------------------------------
# membership inference


def lowest_k_mean(values: np.ndarray, k_percent: float) -> float:
    """Mean of the smallest ceil(k% * n) entries."""
    if not 0 < k_percent <= 100:
        raise MetricError("k_percent must be in (0, 100]")
    values = np.asarray(values, dtype=np.float64)
    take = max(1, math.ceil(k_percent / 100.0 * values.shape[0]))
    return float(np.sort(values)[:take].mean())


def min_k(model, sequence: list, k_percent: float = 20.0) -> float:
    """Mean of the lowest k% token log-probabilities (higher = more
    member-like)."""
    lp, _, _ = lm.token_logprobs(model, sequence)
    return lowest_k_mean(lp, k_percent)


def min_k_pp(model, sequence: list, k_percent: float = 20.0) -> float:
    """Vocabulary-normalized variant: per-token z-scores against the full
    next-token distribution's log-probability moments, lowest k% averaged."""
    lp, mu, sigma = lm.token_logprobs(model, sequence)
    z = (lp - mu) / np.maximum(sigma, SIGMA_FLOOR)
    return lowest_k_mean(z, k_percent)


def mia_auc(member_scores: list, nonmember_scores: list) -> float:
    """Mann-Whitney AUC: P(member > nonmember) + 0.5 P(equal)."""
    m = np.asarray(member_scores, dtype=np.float64)
    n = np.asarray(nonmember_scores, dtype=np.float64)
    if m.size == 0 or n.size == 0:
        raise MetricError("both score sets must be non-empty")
    gt = (m[:, None] > n[None, :]).sum()
    eq = (m[:, None] == n[None, :]).sum()
    return float((gt + 0.5 * eq) / (m.size * n.size))


def priv_leak(auc_unlearn: float, auc_ideal: float) -> float:
    """Signed privacy-leakage percentage,

        100 * (auc_ideal - auc_unlearn) / auc_ideal.

    Zero when the unlearned model matches the retrained reference; negative
    means residual membership signal (under-unlearning), positive means the
    signal was pushed below the reference (over-unlearning).
    """
    if auc_ideal == 0:
        raise MetricError("auc_ideal must be non-zero")
    return 100.0 * (auc_ideal - auc_unlearn) / auc_ideal


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    """Metric values plus the provenance needed to compare runs."""

    model_id: str
    metrics: dict
    split_sizes: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)

    def __post_init__(self):
        bad = {k: v for k, v in self.metrics.items() if not np.isfinite(v)}
        if bad:
            raise MetricError(f"non-finite metric values: {bad}")
        self.metrics = {k: float(v) for k, v in self.metrics.items()}

    def to_json(self) -> str:
        payload = {
            "metrics": dict(sorted(self.metrics.items())),
            "model_id": self.model_id,
            "seeds": dict(sorted(self.seeds.items())),
            "split_sizes": dict(sorted(self.split_sizes.items())),
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        obj = json.loads(text)
        return cls(model_id=obj["model_id"], metrics=obj["metrics"],
                   split_sizes=obj.get("split_sizes", {}), seeds=obj.get("seeds", {}))


def write_reports_csv(reports: list[EvalReport], path: str | Path) -> None:
    """One row per report; metric columns in sorted order (RFC-4180)."""
    cols = sorted({k for r in reports for k in r.metrics})
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, quoting=csv.QUOTE_MINIMAL)
        writer.writerow(["model_id"] + cols)
        for r in reports:
            writer.writerow([r.model_id] + [_fmt(r.metrics.get(c)) for c in cols])


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"
