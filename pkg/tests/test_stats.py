import statistics
from dataclasses import replace

import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from sqlfix.domain import Category
from sqlfix.stats import (
    build_report,
    category_histogram,
    corpus_stats,
    diversity_ratio,
    length_stats,
    minmax_normalize,
    ngram_counts,
    pearson,
)


def grams_oracle(texts, n):
    out = []
    for t in texts:
        words = t.split()
        out.extend(zip(*(words[i:] for i in range(n))))
    return out


words = st.text(alphabet="abc", min_size=1, max_size=2)
texts = st.lists(st.lists(words, max_size=8).map(" ".join), min_size=1, max_size=6)


class TestDiversity:
    def test_hand_cases(self):
        assert diversity_ratio(["a b c d"], 3) == 1.0
        assert diversity_ratio(["a b c", "a b c"], 3) == 0.5
        assert diversity_ratio(["x y", "z"], 1) == 1.0

    def test_windows_stay_inside_a_text(self):
        assert sum(ngram_counts(["a b", "c d"], 3).values()) == 0
        with pytest.raises(ValueError):
            diversity_ratio(["a b", "c d"], 3)

    @given(texts, st.integers(1, 3))
    def test_matches_oracle(self, corpus, n):
        grams = grams_oracle(corpus, n)
        assume(grams)
        assert diversity_ratio(corpus, n) == pytest.approx(len(set(grams)) / len(grams), abs=1e-12)

    def test_whitespace_runs_collapse(self):
        assert ngram_counts(["a  b\n\tc"], 3) == ngram_counts(["a b c"], 3)


class TestLengths:
    def test_hand_case(self):
        s = length_stats(["a b", "a b c d", "a b c"])
        assert (s.mean, s.max, s.n) == (3.0, 4, 3)

    def test_empty(self):
        with pytest.raises(ValueError):
            length_stats([])


class TestPearson:
    def test_perfect(self):
        assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
        assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)

    @pytest.mark.parametrize("xs,ys", [([1, 1, 1], [1, 2, 3]), ([1], [2]), ([1, 2], [1, 2, 3])])
    def test_undefined(self, xs, ys):
        with pytest.raises(ValueError):
            pearson(xs, ys)

    floats = st.floats(-1e3, 1e3, allow_nan=False)

    @given(st.lists(st.tuples(floats, floats), min_size=3, max_size=20))
    def test_matches_stdlib(self, pairs):
        xs, ys = zip(*pairs)
        assume(statistics.pvariance(xs) > 1e-6 and statistics.pvariance(ys) > 1e-6)
        assert pearson(xs, ys) == pytest.approx(statistics.correlation(xs, ys), abs=1e-9)

    @given(st.lists(st.tuples(floats, floats), min_size=3, max_size=20),
           st.floats(0.1, 100), st.floats(-100, 100))
    def test_affine_invariant(self, pairs, scale, shift):
        xs, ys = zip(*pairs)
        assume(statistics.pvariance(xs) > 1e-3 and statistics.pvariance(ys) > 1e-3)
        assert pearson([scale * x + shift for x in xs], ys) == pytest.approx(pearson(xs, ys), abs=1e-9)


def test_minmax():
    assert minmax_normalize([2, 4, 3]) == [0.0, 1.0, 0.5]
    assert minmax_normalize([5, 5]) == [0.0, 0.0]


def test_category_histogram_lists_every_category(fixture_tasks):
    hist = category_histogram(fixture_tasks[:1])
    assert set(hist) == {c.value for c in Category}
    assert sum(hist.values()) == 1


def test_corpus_stats(fixture_tasks):
    cs = corpus_stats("fx", fixture_tasks)
    assert cs.n_tasks == len(fixture_tasks)
    assert sum(cs.categories.values()) == len(fixture_tasks)
    assert 0 < cs.diversity["user_query"] <= 1


class TestReport:
    def corpora(self, fixture_tasks):
        a = fixture_tasks
        b = [replace(t, user_query="same words every time here") for t in fixture_tasks]
        c = [replace(t, user_query=t.user_query + " same words every time") for t in fixture_tasks]
        return {"a": a, "b": b, "c": c}

    def test_correlation(self, fixture_tasks):
        rep = build_report(self.corpora(fixture_tasks), {"a": 0.9, "b": 0.1, "c": 0.5})
        corr = rep.correlation
        assert corr["names"] == ["a", "b", "c"]
        assert corr["r"] == pytest.approx(statistics.correlation(corr["diversity"], corr["success"]))
        assert corr["r_normalized"] == pytest.approx(corr["r"])
        assert corr["diversity_normalized"][1] == 0.0

    def test_too_few_corpora(self, fixture_tasks):
        rep = build_report({"a": fixture_tasks}, {"a": 0.5})
        assert rep.correlation is None and "fewer than two" in rep.notes[0]

    def test_flat_success_noted(self, fixture_tasks):
        rep = build_report(self.corpora(fixture_tasks), {"a": 0.5, "b": 0.5})
        assert rep.correlation is None and "zero variance" in rep.notes[0]

    def test_empty_corpus(self):
        with pytest.raises(ValueError):
            build_report({"a": []})
