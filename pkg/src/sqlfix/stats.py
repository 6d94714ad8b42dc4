"""Dataset statistics: token lengths, n-gram diversity, category counts, correlation.

All token counts use whitespace tokenization (runs of whitespace collapse).
"""

from __future__ import annotations

import math
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, field

from .domain import Category, TaskInstance

TOKENIZER = "whitespace"


def tokens(text: str) -> list[str]:
    return text.split()


def ngram_counts(texts: Iterable[str], n: int = 3) -> Counter:
    """Multiset of n-grams; windows never span two texts."""
    if n < 1:
        raise ValueError("n must be at least 1")
    counts: Counter = Counter()
    for text in texts:
        toks = tokens(text)
        counts.update(tuple(toks[i:i + n]) for i in range(len(toks) - n + 1))
    return counts


def diversity_ratio(texts: Iterable[str], n: int = 3) -> float:
    """Distinct n-grams over total n-grams across the whole corpus."""
    counts = ngram_counts(texts, n)
    total = sum(counts.values())
    if total == 0:
        raise ValueError(f"corpus has no {n}-grams")
    return len(counts) / total


@dataclass(frozen=True)
class LengthStats:
    mean: float
    max: int
    n: int


def length_stats(texts: Sequence[str]) -> LengthStats:
    if not texts:
        raise ValueError("length statistics need a non-empty corpus")
    lengths = [len(tokens(t)) for t in texts]
    return LengthStats(sum(lengths) / len(lengths), max(lengths), len(lengths))


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    if len(xs) != len(ys):
        raise ValueError("series lengths differ")
    if len(xs) < 2:
        raise ValueError("need at least two pairs")
    mx = math.fsum(xs) / len(xs)
    my = math.fsum(ys) / len(ys)
    dx = [x - mx for x in xs]
    dy = [y - my for y in ys]
    sxx = math.fsum(d * d for d in dx)
    syy = math.fsum(d * d for d in dy)
    if sxx == 0 or syy == 0:
        raise ValueError("zero variance: correlation undefined")
    r = math.fsum(a * b for a, b in zip(dx, dy)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def minmax_normalize(values: Sequence[float]) -> list[float]:
    lo, hi = min(values), max(values)
    if hi == lo:
        return [0.0 for _ in values]
    return [(v - lo) / (hi - lo) for v in values]


def category_histogram(tasks: Iterable[TaskInstance]) -> dict[str, int]:
    counts = Counter(t.category.value for t in tasks)
    return {c.value: counts.get(c.value, 0) for c in Category}


# text views of a task used for length and diversity figures
FIELDS = {
    "user_query": lambda t: t.user_query,
    "issue_sql": lambda t: "\n".join(t.issue_sql),
    "solution_sql": lambda t: "\n".join(t.solution_sql),
}


@dataclass
class CorpusStats:
    name: str
    n_tasks: int
    lengths: dict[str, LengthStats]
    diversity: dict[str, float | None]
    categories: dict[str, int]


@dataclass
class StatsReport:
    corpora: list[CorpusStats]
    ngram: int = 3
    tokenizer: str = TOKENIZER
    correlation: dict | None = None
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def corpus_stats(name: str, tasks: Sequence[TaskInstance], n: int = 3) -> CorpusStats:
    if not tasks:
        raise ValueError(f"corpus {name!r} is empty")
    lengths, diversity = {}, {}
    for fname, view in FIELDS.items():
        texts = [view(t) for t in tasks]
        lengths[fname] = length_stats(texts)
        try:
            diversity[fname] = diversity_ratio(texts, n)
        except ValueError:
            diversity[fname] = None
    return CorpusStats(name, len(tasks), lengths, diversity, category_histogram(tasks))


def build_report(
    corpora: Mapping[str, Sequence[TaskInstance]],
    success: Mapping[str, float] | None = None,
    n: int = 3,
    field_name: str = "user_query",
) -> StatsReport:
    """Per-corpus statistics, plus diversity/success correlation when a
    success rate is supplied for at least two corpora."""
    report = StatsReport([corpus_stats(k, v, n) for k, v in corpora.items()], ngram=n)
    if success:
        pairs = [(c.name, c.diversity[field_name], float(success[c.name]))
                 for c in report.corpora if c.name in success and c.diversity[field_name] is not None]
        if len(pairs) < 2:
            report.notes.append("correlation skipped: fewer than two corpora with success rates")
        else:
            names = [p[0] for p in pairs]
            raw = [p[1] for p in pairs]
            sr = [p[2] for p in pairs]
            try:
                r_raw = pearson(raw, sr)
                # min-max scaling is affine, so r is unchanged; both series are reported
                norm = minmax_normalize(raw)
                report.correlation = {
                    "field": field_name, "names": names, "diversity": raw,
                    "diversity_normalized": norm, "success": sr, "r": r_raw,
                    "r_normalized": pearson(norm, sr),
                }
            except ValueError as exc:
                report.notes.append(f"correlation skipped: {exc}")
    return report
