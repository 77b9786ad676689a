"""PLL scoring against brute-force and closed-form oracles; pair tooling."""

import json
import math

import numpy as np
import pytest

from desklm import evaluation as ev
from desklm import model as mdl
from desklm.corpus import Document
from desklm.subwords import SPECIAL_TOKENS, UNK_ID, SubwordModel, train_subwords

from helpers import brute_force_pll, zero_params


@pytest.fixture(scope="module")
def toy_subwords():
    docs = [Document(id=f"t{i}", text=t, source="unconstrained")
            for i, t in enumerate(ev.toy_vocabulary_sentences())]
    return train_subwords(docs, 250)


@pytest.fixture(scope="module")
def small_params():
    cfg = mdl.ModelConfig(vocab_size=250, n_layers=1, n_heads=2, d_model=16,
                          d_ff=32, max_positions=64, dropout=0.0, seed=7)
    return mdl.init_params(cfg)


class TestMinimalPair:
    def test_validation(self):
        with pytest.raises(ValueError, match="non-empty"):
            ev.MinimalPair("", "b", "p")
        with pytest.raises(ValueError, match="differ"):
            ev.MinimalPair("same", "same", "p")
        with pytest.raises(ValueError, match="phenomenon"):
            ev.MinimalPair("a", "b", "")


class TestPseudoLogLikelihood:
    def test_agrees_with_brute_force(self, toy_subwords, small_params):
        pairs = ev.generate_toy_minimal_pairs("subject-verb", 5, seed=3)
        sentences = [p.good for p in pairs] + [p.bad for p in pairs]
        for s in sentences:
            fast = ev.pseudo_log_likelihood(small_params, toy_subwords, s)
            slow = brute_force_pll(small_params, toy_subwords, s)
            assert abs(fast - slow) <= 1e-6, s

    def test_uniform_model_closed_form(self, toy_subwords):
        cfg = mdl.ModelConfig(vocab_size=250, n_layers=1, n_heads=2,
                              d_model=16, d_ff=32, dropout=0.0)
        params = zero_params(cfg)
        sentence = "the old cat sleeps near the river"
        n = len(toy_subwords.encode(sentence))
        pll = ev.pseudo_log_likelihood(params, toy_subwords, sentence)
        assert abs(pll - n * math.log(1.0 / 250)) <= 1e-9

    def test_uniform_model_prefers_shorter(self, toy_subwords):
        cfg = mdl.ModelConfig(vocab_size=250, n_layers=1, n_heads=2,
                              d_model=16, d_ff=32, dropout=0.0)
        params = zero_params(cfg)
        short = ev.pseudo_log_likelihood(params, toy_subwords, "the cat sleeps")
        long = ev.pseudo_log_likelihood(params, toy_subwords,
                                        "the cat sleeps near the river")
        assert short > long

    def test_empty_sentence_rejected(self, toy_subwords, small_params):
        with pytest.raises(ValueError, match="zero tokens"):
            ev.pseudo_log_likelihood(small_params, toy_subwords, "   ")

    def test_over_length_rejected(self, toy_subwords, small_params):
        sentence = " ".join(["cat"] * 70)
        with pytest.raises(ValueError, match="model accepts 64"):
            ev.pseudo_log_likelihood(small_params, toy_subwords, sentence)


def _biased_model_and_vocab():
    """Zeroed model over a 12-token hand vocabulary with a known bias row:
    every masked position sees exactly softmax(bias)."""
    vocab = list(SPECIAL_TOKENS) + [" ", "x", "y", "z", " y", " z"]
    sub = SubwordModel(vocab, [(" ", "y"), (" ", "z")])
    cfg = mdl.ModelConfig(vocab_size=12, n_layers=1, n_heads=2, d_model=8,
                          d_ff=16, dropout=0.0)
    params = zero_params(cfg)
    bias = np.zeros(12)
    bias[7], bias[10], bias[11] = 1.0, 0.5, -0.5   # "x", " y", " z"
    bias[8], bias[9] = 0.25, -1.0                  # "y", "z"
    params["mlm.b"].data[...] = bias
    return params, sub, bias


class TestClosedFormModel:
    def test_hand_computed_pll(self):
        params, sub, bias = _biased_model_and_vocab()
        assert sub.encode("x y z") == [7, 10, 11]
        lse = math.log(math.fsum(math.exp(b) for b in bias))
        expect = (bias[7] - lse) + (bias[10] - lse) + (bias[11] - lse)
        got = ev.pseudo_log_likelihood(params, sub, "x y z")
        assert abs(got - expect) <= 1e-9

    def test_shift_invariance(self):
        params, sub, _ = _biased_model_and_vocab()
        base = ev.pseudo_log_likelihood(params, sub, "x y z")
        params["mlm.b"].data += 3.7
        shifted = ev.pseudo_log_likelihood(params, sub, "x y z")
        assert abs(base - shifted) <= 1e-9

    def test_score_pair_follows_bias(self):
        params, sub, _ = _biased_model_and_vocab()
        # single-token sentences: preference is exactly by bias entry
        assert ev.score_pair(params, sub, ev.MinimalPair("x", "y", "p"))
        assert not ev.score_pair(params, sub, ev.MinimalPair("z", "x", "p"))

    def test_ties_count_as_incorrect(self):
        params, sub, _ = _biased_model_and_vocab()
        params["mlm.b"].data[...] = 0.0
        assert not ev.score_pair(params, sub, ev.MinimalPair("x", "y", "p"))
        assert not ev.score_pair(params, sub, ev.MinimalPair("y", "x", "p"))

    def test_evaluate_suite_arithmetic(self):
        params, sub, _ = _biased_model_and_vocab()
        pairs = [ev.MinimalPair("x", "y", "p1"),   # correct
                 ev.MinimalPair("z", "x", "p1"),   # incorrect
                 ev.MinimalPair("x", "z", "p2")]   # correct
        report = ev.evaluate_suite(params, sub, pairs, model_id="m",
                                   pairs_id="hand")
        assert report.counts == {"p1": (1, 2), "p2": (1, 1)}
        assert report.accuracy("p1") == 0.5
        assert report.pair_count == 3
        assert abs(report.macro_average - 0.75) <= 1e-12

    def test_empty_suite_rejected(self):
        params, sub, _ = _biased_model_and_vocab()
        with pytest.raises(ValueError, match="no pairs"):
            ev.evaluate_suite(params, sub, [])


class TestEvalReport:
    def test_count_validation(self):
        with pytest.raises(ValueError, match="bad counts"):
            ev.EvalReport("m", "p", {"x": (3, 2)})

    def test_json_round_trip(self):
        report = ev.EvalReport("model-a", "pairs-b",
                               {"sv": (400, 500), "dn": (250, 500)})
        back = ev.EvalReport.from_json(report.to_json())
        assert back.model_id == "model-a"
        assert back.pairs_id == "pairs-b"
        assert back.counts == report.counts

    def test_json_is_stable(self):
        report = ev.EvalReport("m", "p", {"a": (1, 2)})
        assert report.to_json() == report.to_json()
        assert report.to_json().endswith("\n")

    def test_pair_count_consistency_enforced(self):
        report = ev.EvalReport("m", "p", {"a": (1, 2)})
        obj = json.loads(report.to_json())
        obj["pair_count"] = 99
        with pytest.raises(ValueError, match="pair_count"):
            ev.EvalReport.from_json(json.dumps(obj))

    def test_text_table(self):
        report = ev.EvalReport("m", "p", {"subject-verb agreement": (400, 500),
                                          "determiner-noun agreement": (100, 200)})
        text = report.to_text()
        lines = text.splitlines()
        assert lines[0].startswith("phenomenon")
        assert "0.8000" in text and "0.5000" in text
        assert "macro average" in lines[-1]
        assert "0.6500" in lines[-1]
        assert text.endswith("\n")


class TestToyPairs:
    def test_exactly_one_token_differs(self):
        for kind in ("subject-verb", "determiner-noun"):
            for p in ev.generate_toy_minimal_pairs(kind, 50, seed=1):
                g, b = p.good.split(), p.bad.split()
                assert len(g) == len(b)
                assert sum(x != y for x, y in zip(g, b)) == 1

    def test_subject_verb_flip_position(self):
        singular_verbs = {v for v, _ in ev._VERBS}
        plural_verbs = {v for _, v in ev._VERBS}
        plural_nouns = {p for _, p in ev._NOUNS}
        for p in ev.generate_toy_minimal_pairs("subject-verb", 50, seed=2):
            g, b = p.good.split(), p.bad.split()
            i = next(k for k, (x, y) in enumerate(zip(g, b)) if x != y)
            assert {g[i], b[i]} <= singular_verbs | plural_verbs
            noun = g[i - 1]
            if noun in plural_nouns:
                assert g[i] in plural_verbs and b[i] in singular_verbs
            else:
                assert g[i] in singular_verbs and b[i] in plural_verbs

    def test_determiner_noun_flip_position(self):
        dets = {d for pair in ev._DETERMINERS for d in pair}
        plural_dets = {p for _, p in ev._DETERMINERS}
        plural_nouns = {p for _, p in ev._NOUNS}
        for p in ev.generate_toy_minimal_pairs("determiner-noun", 50, seed=3):
            g, b = p.good.split(), p.bad.split()
            assert g[0] != b[0]
            assert {g[0], b[0]} <= dets
            assert g[1:] == b[1:]
            noun = next(w for w in g if w in plural_nouns
                        or any(w == s for s, _ in ev._NOUNS))
            assert (g[0] in plural_dets) == (noun in plural_nouns)

    def test_phenomenon_labels_and_aliases(self):
        p1 = ev.generate_toy_minimal_pairs("subject-verb", 1, seed=0)[0]
        assert p1.phenomenon == ev.SUBJECT_VERB
        p2 = ev.generate_toy_minimal_pairs(ev.SUBJECT_VERB, 1, seed=0)[0]
        assert p2 == p1
        p3 = ev.generate_toy_minimal_pairs("determiner-noun", 1, seed=0)[0]
        assert p3.phenomenon == ev.DETERMINER_NOUN

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown pair kind"):
            ev.generate_toy_minimal_pairs("anaphora", 5, seed=0)
        with pytest.raises(ValueError, match="n must be"):
            ev.generate_toy_minimal_pairs("subject-verb", 0, seed=0)

    def test_five_hundred_unique_and_deterministic(self):
        a = ev.generate_toy_minimal_pairs("subject-verb", 500, seed=9)
        b = ev.generate_toy_minimal_pairs("subject-verb", 500, seed=9)
        assert a == b
        assert len({p.good for p in a}) == 500
        c = ev.generate_toy_minimal_pairs("subject-verb", 500, seed=10)
        assert c != a

    def test_plurality_balanced(self):
        plural_nouns = {p for _, p in ev._NOUNS}
        pairs = ev.generate_toy_minimal_pairs("subject-verb", 500, seed=4)
        frac = np.mean([any(w in plural_nouns for w in p.good.split())
                        for p in pairs])
        assert 0.4 < frac < 0.6

    def test_vocabulary_closed_under_tokenizer(self, toy_subwords):
        pairs = (ev.generate_toy_minimal_pairs("subject-verb", 10, seed=5)
                 + ev.generate_toy_minimal_pairs("determiner-noun", 10, seed=5))
        for p in pairs:
            for s in (p.good, p.bad):
                assert UNK_ID not in toy_subwords.encode(s)


class TestPairFiles:
    def test_round_trip(self, tmp_path):
        pairs = ev.generate_toy_minimal_pairs("determiner-noun", 10, seed=6)
        path = tmp_path / "pairs.jsonl"
        ev.save_minimal_pairs(pairs, path)
        assert ev.load_minimal_pairs(path) == pairs

    def test_blimp_format(self, tmp_path):
        path = tmp_path / "blimp.jsonl"
        recs = [{"sentence_good": "the cat sleeps",
                 "sentence_bad": "the cat sleep",
                 "UID": "regular_plural_subject_verb_agreement_1",
                 "field": "morphology"}]
        path.write_text("\n".join(json.dumps(r) for r in recs) + "\n")
        pairs = ev.load_blimp_pairs(path)
        assert pairs == [ev.MinimalPair(
            "the cat sleeps", "the cat sleep",
            "regular_plural_subject_verb_agreement_1")]

    def test_error_reports_line_number(self, tmp_path):
        path = tmp_path / "pairs.jsonl"
        path.write_text('{"good": "a", "bad": "b", "phenomenon": "p"}\n'
                        'not json\n')
        with pytest.raises(ValueError, match="line 2"):
            ev.load_minimal_pairs(path)
        path.write_text('{"good": "a", "bad": "b"}\n')
        with pytest.raises(ValueError, match="line 1: bad pair record"):
            ev.load_minimal_pairs(path)

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "pairs.jsonl"
        path.write_text('\n{"good": "a", "bad": "b", "phenomenon": "p"}\n\n')
        assert len(ev.load_minimal_pairs(path)) == 1
