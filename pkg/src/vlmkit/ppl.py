"""Perplexity scoring and lowest-perplexity corpus selection."""
from __future__ import annotations

import itertools
import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Hashable, Iterable, Iterator, Sequence

from .corpus import CorpusRecord, validate_logprobs

log = logging.getLogger(__name__)

BOS = "<s>"

Scorer = Callable[[str], Sequence[float]]


def perplexity(logprobs: Sequence[float]) -> float:
    """exp of the mean negative natural-log probability."""
    values = validate_logprobs(list(logprobs))
    return math.exp(-math.fsum(values) / len(values))


@dataclass(frozen=True)
class ScoredRecord:
    record_id: str
    perplexity: float
    source_index: int


@dataclass(frozen=True)
class RecordError:
    record_id: str | None
    source_index: int
    message: str


@dataclass
class NGramModel:
    order: int
    alpha: float
    vocab: frozenset
    counts: dict[tuple, Counter] = field(repr=False)
    totals: dict[tuple, int] = field(repr=False)

    def context(self, history: Sequence[Hashable]) -> tuple:
        n = self.order - 1
        if n == 0:
            return ()
        padded = (BOS,) * n + tuple(history)
        return padded[-n:]

    def logprob(self, token: Hashable, ctx: tuple) -> float:
        # out-of-vocabulary tokens get the smoothed zero-count floor
        c = self.counts.get(ctx)
        num = (c[token] if c else 0) + self.alpha
        den = self.totals.get(ctx, 0) + self.alpha * len(self.vocab)
        return math.log(num / den)

    def prob(self, token: Hashable, ctx: tuple) -> float:
        return math.exp(self.logprob(token, ctx))


def train_ngram(corpus: Iterable[Sequence[Hashable]], order: int = 2, alpha: float = 1.0) -> NGramModel:
    """Count order-``k`` transitions with ``k-1`` begin-of-sequence pads."""
    if order < 1:
        raise ValueError(f"order must be >= 1, got {order}")
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    counts: dict[tuple, Counter] = {}
    vocab: set = set()
    n_seq = 0
    for seq in corpus:
        n_seq += 1
        seq = list(seq)
        vocab.update(seq)
        padded = [BOS] * (order - 1) + seq
        for i, tok in enumerate(seq):
            ctx = tuple(padded[i:i + order - 1])
            counts.setdefault(ctx, Counter())[tok] += 1
    if n_seq == 0:
        raise ValueError("cannot train on an empty corpus")
    if not vocab:
        raise ValueError("corpus contains no tokens")
    totals = {ctx: sum(c.values()) for ctx, c in counts.items()}
    return NGramModel(order, float(alpha), frozenset(vocab), counts, totals)


def score_ngram(model: NGramModel, tokens: Sequence[Hashable]) -> list[float]:
    tokens = list(tokens)
    if not tokens:
        raise ValueError("cannot score an empty token sequence")
    return [model.logprob(tok, model.context(tokens[:i])) for i, tok in enumerate(tokens)]


def tokenize(text: str, chars: bool = False) -> list[str]:
    return list(text) if chars else text.split()


class NGramScorer:
    """Callable scorer: caption text -> per-token log-probs."""

    def __init__(self, model: NGramModel, chars: bool = False):
        self.model = model
        self.chars = chars

    @classmethod
    def fit(cls, texts: Iterable[str], order: int = 2, alpha: float = 1.0, chars: bool = False) -> "NGramScorer":
        return cls(train_ngram((tokenize(t, chars) for t in texts), order, alpha), chars)

    def __call__(self, text: str) -> list[float]:
        return score_ngram(self.model, tokenize(text, self.chars))


def _score_one(item: tuple[int, CorpusRecord], scorer: Scorer | None) -> ScoredRecord | RecordError:
    idx, rec = item
    try:
        if rec.logprobs is not None:
            lp = rec.logprobs
        elif rec.caption is not None and scorer is not None:
            lp = scorer(rec.caption)
        elif rec.caption is None:
            raise ValueError("record has neither caption text nor logprobs")
        else:
            raise ValueError("record has no logprobs and no scorer was given")
        return ScoredRecord(rec.id, perplexity(lp), idx)
    except (ValueError, ArithmeticError) as exc:
        return RecordError(getattr(rec, "id", None), idx, str(exc))


def score_corpus(records: Iterable[CorpusRecord], scorer: Scorer | None = None, workers: int = 1,
                 errors: list[RecordError] | None = None, chunk_size: int = 256) -> Iterator[ScoredRecord]:
    """Lazily score a record stream in input order.

    Records carrying ``logprobs`` skip the scorer. Unscorable records are
    logged, appended to ``errors`` if given, and left out of the output.
    """
    workers = max(1, int(workers))
    it = enumerate(records)
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        while True:
            batch = list(itertools.islice(it, chunk_size * workers))
            if not batch:
                break
            if pool is None:
                results = [_score_one(item, scorer) for item in batch]
            else:
                results = pool.map(_score_one, batch, itertools.repeat(scorer))
            for res in results:
                if isinstance(res, RecordError):
                    log.warning("record %d (%s): %s", res.source_index, res.record_id, res.message)
                    if errors is not None:
                        errors.append(res)
                    continue
                yield res
    finally:
        if pool is not None:
            pool.shutdown()


def keep_count(n: int, keep_fraction: float) -> int:
    if not 0 < keep_fraction <= 1:
        raise ValueError(f"keep fraction must be in (0, 1], got {keep_fraction}")
    # read the fraction as the decimal the user typed: 0.29 * 100 -> 29
    return max(1, math.floor(Fraction(repr(float(keep_fraction))) * n))


def filter_corpus(scored: Sequence[ScoredRecord], keep_fraction: float = 0.2) -> list[str]:
    """Ids of the lowest-perplexity ``keep_fraction`` of ``scored``, ascending."""
    if not 0 < keep_fraction <= 1:
        raise ValueError(f"keep fraction must be in (0, 1], got {keep_fraction}")
    if not scored:
        raise ValueError("nothing to filter")
    ranked = sorted(scored, key=lambda s: (s.perplexity, s.source_index))
    return [s.record_id for s in ranked[:keep_count(len(ranked), keep_fraction)]]
