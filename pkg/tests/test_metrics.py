"""Tests for judge, memorization, and membership-inference metrics."""

import numpy as np
import pytest

from unlearnkit import lm
from unlearnkit.lm import LmConfig, build_model, encode
from unlearnkit.metrics import (
    EvalReport,
    JudgeCandidateSet,
    MetricError,
    acc_forget,
    acc_recover,
    acc_retain,
    exact_memorization,
    extraction_strength,
    extraction_strength_brute,
    extraction_strength_one,
    judge_select,
    knowledge_memorization,
    lowest_k_mean,
    mia_auc,
    min_k,
    min_k_pp,
    model_utility,
    priv_leak,
    rouge_l,
    token_f1,
    verbatim_memorization,
    write_reports_csv,
)
from unlearnkit.synthbench import QaItem, qa_prompt

from fixtures import FixedLogitsModel, PromptAnswerModel, SequenceMemorizer, UniformModel


def qa(question, answer, perturbed=("x", "y", "z")):
    return QaItem(entity_id=None, question=question, answer=answer,
                  perturbed_answers=list(perturbed), split_tag="utility", kind="t")


class TestRouge:
    def test_identical(self):
        assert rouge_l("The cat sat.", "the cat sat") == 1.0

    def test_disjoint(self):
        assert rouge_l("alpha beta", "gamma delta") == 0.0

    def test_hand_lcs(self):
        assert abs(rouge_l("the cat sat", "the dog sat") - 2 / 3) < 1e-12

    def test_empty_candidate(self):
        assert rouge_l("", "something") == 0.0

    def test_empty_reference_is_error(self):
        with pytest.raises(MetricError):
            rouge_l("anything", " .,! ")


class TestJudge:
    def test_exact_ground_truth(self):
        cs = JudgeCandidateSet("ideal answer", "gold answer", ["wrong one", "other wrong", "third wrong"], seed=0)
        sel = judge_select("gold answer", cs)
        assert cs.role_at(sel) == "ground_truth"

    def test_none_when_no_overlap(self):
        cs = JudgeCandidateSet("alpha", "beta", ["gamma", "delta", "epsilon"], seed=1)
        assert judge_select("zzz qqq", cs) is None

    def test_florence_case(self):
        cs = JudgeCandidateSet("born in Florence", "born in Kyoto", ["born in Oslo"], seed=2)
        # F1 vs the Florence candidate is 1.0, vs Kyoto 2/3: argmax wins
        assert abs(token_f1("born in Florence", "born in Kyoto") - 2 / 3) < 1e-12
        sel = judge_select("born in Florence", cs)
        assert cs.shuffled[sel][1] == "born in Florence"

    def test_permutation_robust_outcome(self):
        for seed in range(8):
            cs = JudgeCandidateSet("silver lake", "green hill", ["red barn", "blue door", "tall tree"], seed=seed)
            sel = judge_select("the green hill", cs)
            assert cs.role_at(sel) == "ground_truth"

    def test_tie_breaks_to_earliest_shuffled_index(self):
        cs = JudgeCandidateSet("same text", "same text", ["unrelated thing"], seed=3)
        sel = judge_select("same text", cs)
        assert sel == min(
            i for i, (_, text) in enumerate(cs.shuffled) if text == "same text"
        )


class TestAccMetrics:
    def _sets(self, n, seed0=0):
        return [
            JudgeCandidateSet(f"ideal {i}", f"gold {i}", [f"bad {i} a", f"bad {i} b", f"bad {i} c"], seed=seed0 + i)
            for i in range(n)
        ]

    def test_always_ground_truth(self):
        sets = self._sets(4)
        outputs = [f"gold {i}" for i in range(4)]
        assert acc_forget(outputs, sets) == 0.0
        assert acc_retain(outputs, sets) == 1.0

    def test_always_ideal(self):
        sets = self._sets(4)
        outputs = [f"ideal {i}" for i in range(4)]
        assert acc_forget(outputs, sets) == 1.0
        assert acc_recover(outputs, sets) == 1.0

    def test_mixed_three_of_four(self):
        sets = self._sets(4)
        outputs = [f"gold 0", f"ideal 1", f"bad 2 a", f"bad 3 b"]
        assert acc_forget(outputs, sets) == 0.75

    def test_recover_one_of_four(self):
        sets = self._sets(4)
        outputs = [f"ideal 0", f"gold 1", f"bad 2 a", "zzz"]
        assert acc_recover(outputs, sets) == 0.25

    def test_retain_with_none_selection(self):
        sets = self._sets(4)
        outputs = [f"gold 0", f"ideal 1", f"bad 2 a", "qqq www"]  # last judges to NONE
        assert acc_retain(outputs, sets) == 0.5

    def test_forget_plus_gt_fraction_is_one(self):
        sets = self._sets(6)
        rng = np.random.default_rng(0)
        pool = ["gold {i}", "ideal {i}", "bad {i} a", "zzz"]
        outputs = [pool[rng.integers(0, 4)].format(i=i) for i in range(6)]
        af = acc_forget(outputs, sets)
        gt_frac = np.mean([
            (lambda s: s is not None and sets[i].role_at(s) == "ground_truth")(judge_select(outputs[i], sets[i]))
            for i in range(6)
        ])
        assert abs(af + gt_frac - 1.0) < 1e-12


class TestExtractionStrength:
    def test_lookup_model_long(self):
        s = list(range(10, 19)) + [30]  # length 10, no specials
        model = SequenceMemorizer(s)
        assert extraction_strength_one(model, s) == pytest.approx(0.9)

    def test_uniform_model_zero(self):
        s = [1, 2, 3, 4]
        assert extraction_strength_one(UniformModel(), s) == 0.0

    def test_length_two_memorized(self):
        s = [5, 9]
        model = SequenceMemorizer(s)
        assert extraction_strength_one(model, s) == pytest.approx(0.5)

    def test_perfect_lookup_is_one_minus_inverse_length(self):
        for n in (2, 5, 16):
            s = list(range(40, 40 + n))
            assert extraction_strength_one(SequenceMemorizer(s), s) == pytest.approx(1 - 1 / n)

    def test_matches_brute_force_on_fixtures(self):
        s = list(range(10, 20))
        for model in (SequenceMemorizer(s), UniformModel()):
            assert extraction_strength_one(model, s) == extraction_strength_brute(model, s)

    def test_matches_brute_force_on_trained_model(self):
        cfg = LmConfig(d_model=32, n_layers=1, n_heads=2, d_ff=64, max_seq_len=64, seed=0)
        from unlearnkit.training import TrainConfig, doc_example, finetune

        texts = ["one small stone.", "two small stones."]
        model, _ = finetune(
            build_model(cfg).params, cfg, [doc_example(t) for t in texts],
            TrainConfig(learning_rate=2e-3, epochs=40, batch_size=2, seed=0),
        )
        for t in texts:
            s = encode(t)
            assert extraction_strength_one(model, s) == extraction_strength_brute(model, s)

    def test_rejects_eot_inside_sequence(self):
        with pytest.raises(MetricError):
            extraction_strength_one(UniformModel(), [1, lm.EOT_ID, 2])

    def test_mean_over_sequences(self):
        s1 = list(range(10, 20))
        model = SequenceMemorizer(s1)
        got = extraction_strength(model, [s1, s1])
        assert got == pytest.approx(0.9)


class TestMemorization:
    def test_exact_memorization_perfect(self):
        s = list(range(10, 20))
        assert exact_memorization(SequenceMemorizer(s), [s]) == 1.0

    def test_exact_memorization_chance(self):
        s = list(range(10, 30))
        assert exact_memorization(UniformModel(), [s]) < 0.05

    def test_exact_memorization_half(self):
        v = 50
        s = [0, 1, 2, 3, 4, 5, 6, 7]
        table = np.zeros((8, v), dtype=np.float32)
        for t in range(1, 8):
            correct = s[t]
            table[t - 1, correct if t in (4, 6) else (correct + 1) % v] = 5.0
        model = FixedLogitsModel(table)
        # prefix 4, suffix positions 4..7: exactly two predicted correctly
        assert exact_memorization(model, [s], prefix_fraction=0.5) == 0.5

    def test_verbatim_perfect_and_chance(self):
        text = "rivers run around old bridges."
        s = encode(text)
        model = SequenceMemorizer(s)
        assert verbatim_memorization(model, [s]) == 1.0
        assert verbatim_memorization(UniformModel(), [s]) == 0.0

    def test_knowledge_memorization_fixture(self):
        items = [qa("What color is the sky?", "deep blue"), qa("What color is grass?", "bright green")]
        gold = PromptAnswerModel({qa_prompt(i.question): " " + i.answer for i in items})
        assert knowledge_memorization(gold, items) == 1.0
        silent = PromptAnswerModel({})
        assert knowledge_memorization(silent, items) == 0.0

    def test_knowledge_memorization_half(self):
        items = [qa("Q one?", "alpha"), qa("Q two?", "beta")]
        model = PromptAnswerModel({qa_prompt(items[0].question): " alpha", qa_prompt(items[1].question): " zzz"})
        assert knowledge_memorization(model, items) == 0.5


class TestMinK:
    def test_hand_sorted_mean(self):
        assert lowest_k_mean(np.array([-1.0, -2.0, -3.0, -4.0, -5.0]), 40.0) == -4.5

    def test_full_average(self):
        assert lowest_k_mean(np.array([-1.0, -2.0, -3.0, -4.0, -5.0]), 100.0) == -3.0

    def test_uniform_model_any_k(self):
        model = UniformModel(vocab_size=258)
        seq = [1, 2, 3, 4, 5, 6]
        for k in (10, 20, 100):
            assert min_k(model, seq, k) == pytest.approx(-np.log(258.0), abs=1e-6)

    def test_min_k_monotone_in_k(self):
        cfg = LmConfig(d_model=32, n_layers=1, n_heads=2, d_ff=64, max_seq_len=64, seed=1)
        model = build_model(cfg)
        seq = encode("monotone in k please")
        vals = [min_k(model, seq, k) for k in (10, 30, 60, 100)]
        assert all(vals[i] <= vals[i + 1] + 1e-12 for i in range(len(vals) - 1))

    def test_min_k_pp_uniform_guard(self):
        # sigma collapses to ~0; the floor keeps z from blowing up
        assert min_k_pp(UniformModel(), [1, 2, 3, 4]) == pytest.approx(0.0, abs=1e-6)

    def test_min_k_pp_hand_toy(self):
        p = np.array([0.7, 0.2, 0.1])
        row = np.log(p)
        model = FixedLogitsModel(np.stack([row, row, row]))
        seq = [0, 1, 2, 0]  # picked logprobs: log .2, log .1, log .7
        ls = np.log(p)
        mu = float((p * ls).sum())
        sigma = float(np.sqrt((p * (ls - mu) ** 2).sum()))
        z = (np.array([np.log(0.2), np.log(0.1), np.log(0.7)]) - mu) / sigma
        assert min_k_pp(model, seq, 100.0) == pytest.approx(z.mean(), abs=1e-6)
        assert min_k_pp(model, seq, 33.0) == pytest.approx(np.sort(z)[0], abs=1e-6)

    def test_bad_k(self):
        with pytest.raises(MetricError):
            min_k(UniformModel(), [1, 2, 3], 0.0)


class TestMiaAuc:
    def test_perfect_separation(self):
        assert mia_auc([3, 4], [1, 2]) == 1.0

    def test_identical_multisets(self):
        assert mia_auc([1, 2, 3], [1, 2, 3]) == 0.5

    def test_hand_quarter(self):
        assert mia_auc([1, 3], [2, 4]) == 0.25

    def test_complement_symmetry(self):
        rng = np.random.default_rng(0)
        a = list(rng.standard_normal(9))
        b = list(rng.standard_normal(7))
        assert mia_auc(a, b) + mia_auc(b, a) == pytest.approx(1.0)

    def test_empty_error(self):
        with pytest.raises(MetricError):
            mia_auc([], [1.0])


class TestPrivLeak:
    def test_matching_ideal_is_zero(self):
        assert priv_leak(0.5, 0.5) == 0.0

    def test_target_style_minus_hundred(self):
        assert priv_leak(1.0, 0.5) == -100.0

    def test_over_unlearning_positive(self):
        assert priv_leak(0.3, 0.5) == pytest.approx(40.0)

    def test_zero_ideal_error(self):
        with pytest.raises(MetricError):
            priv_leak(0.2, 0.0)


class TestModelUtility:
    def test_perfect(self):
        items = [qa("Q a?", "gold one"), qa("Q b?", "gold two")]
        model = PromptAnswerModel({qa_prompt(i.question): " " + i.answer for i in items})
        assert model_utility(model, items) == 1.0

    def test_all_wrong_near_zero(self):
        items = [qa("Q a?", "gold one"), qa("Q b?", "gold two")]
        assert model_utility(PromptAnswerModel({}), items) < 1e-3

    def test_harmonic_mean_hand(self):
        items = [qa("Q a?", "blue stone"), qa("Q b?", "red barn")]
        model = PromptAnswerModel({
            qa_prompt(items[0].question): " blue stone",
            qa_prompt(items[1].question): " red door",  # rouge 0.5
        })
        assert model_utility(model, items) == pytest.approx(2 / 3, abs=1e-9)


class TestEvalReport:
    def test_rejects_non_finite(self):
        with pytest.raises(MetricError):
            EvalReport(model_id="m", metrics={"a": float("nan")})

    def test_json_round_trip(self):
        r = EvalReport(model_id="m", metrics={"b": 0.5, "a": 1.0}, split_sizes={"val": 3}, seeds={"run": 1})
        r2 = EvalReport.from_json(r.to_json())
        assert r2.metrics == r.metrics and r2.model_id == "m"

    def test_csv_stable_columns(self, tmp_path):
        rs = [
            EvalReport(model_id="target", metrics={"b_metric": 0.25, "a_metric": 1.0}),
            EvalReport(model_id="ideal", metrics={"a_metric": 0.5}),
        ]
        p1, p2 = tmp_path / "r1.csv", tmp_path / "r2.csv"
        write_reports_csv(rs, p1)
        write_reports_csv(rs, p2)
        assert p1.read_bytes() == p2.read_bytes()
        header = p1.read_text().splitlines()[0]
        assert header == "model_id,a_metric,b_metric"
