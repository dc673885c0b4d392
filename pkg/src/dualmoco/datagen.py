"""Synthetic bilingual world with known semantics.

Sentences are sequences of concept ids. Each "language" renders a concept
through its own surface-token bijection, applies a fixed word-order rule,
and sprinkles in function tokens from a small noise vocabulary disjoint
from the concept tokens. Because the underlying concept sets are known,
every downstream task gets exact gold labels for free: alignment for
retrieval, true pairs for mining, set-Jaccard for similarity, and a
set-relation rule for inference triples.

Every concept set generated within one corpus is unique, which makes the
aligned sentence the unique maximum-Jaccard match of its partner.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, CorpusParseError, EmptyCorpusError

NLI_LABELS = ("entailment", "neutral", "contradiction")

SPLITS = ("train", "validation", "test")

_MAX_SAMPLING_ATTEMPTS = 2000


@dataclass
class ConceptLexicon:
    """Concept-to-token bijections and noise vocabularies for both languages."""

    concept_count: int
    surface_a: np.ndarray  # (concept_count,) token ids, unique
    surface_b: np.ndarray
    noise_a: np.ndarray    # function-token ids, disjoint from surface_a
    noise_b: np.ndarray

    @property
    def vocab_size_a(self) -> int:
        return self.concept_count + len(self.noise_a)

    @property
    def vocab_size_b(self) -> int:
        return self.concept_count + len(self.noise_b)


def make_lexicon(concept_count: int = 380, noise_count: int = 20, seed: int = 0) -> ConceptLexicon:
    """Build per-language surface permutations over a shared concept inventory."""
    if concept_count < 1:
        raise ConfigError(f"concept_count must be >= 1 (got {concept_count})")
    if noise_count < 1:
        raise ConfigError(f"noise_count must be >= 1 (got {noise_count})")
    rng = np.random.default_rng(seed)
    vocab = concept_count + noise_count
    perm_a = rng.permutation(vocab)
    perm_b = rng.permutation(vocab)
    return ConceptLexicon(
        concept_count=concept_count,
        surface_a=perm_a[:concept_count],
        surface_b=perm_b[:concept_count],
        noise_a=perm_a[concept_count:],
        noise_b=perm_b[concept_count:],
    )


@dataclass
class PairExample:
    tokens_a: tuple[int, ...]
    tokens_b: tuple[int, ...]
    concepts: tuple[int, ...]
    split: str


@dataclass
class ParallelCorpus:
    """Aligned sentence pairs; both sides of a pair share one concept set."""

    pairs: list[PairExample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pairs)

    def split(self, name: str) -> list[PairExample]:
        return [p for p in self.pairs if p.split == name]

    def max_token_a(self) -> int:
        return max(max(p.tokens_a) for p in self.pairs)

    def max_token_b(self) -> int:
        return max(max(p.tokens_b) for p in self.pairs)


@dataclass
class MiningCorpus:
    """Two sentence collections with a partially parallel gold alignment."""

    side_a: list[tuple[int, ...]]
    side_b: list[tuple[int, ...]]
    gold_pairs: list[tuple[int, int]]
    parallel_fraction: float


@dataclass
class StsPair:
    tokens_1: tuple[int, ...]
    tokens_2: tuple[int, ...]
    gold_sim: float  # Jaccard of the two concept sets


@dataclass
class NliTriple:
    premise: tuple[int, ...]
    hypothesis: tuple[int, ...]
    label: str


def nli_label(premise_concepts: Iterable[int], hypothesis_concepts: Iterable[int]) -> str:
    """entailment iff hypothesis concepts are a strict subset of the premise's;
    contradiction iff the sets are disjoint; neutral otherwise."""
    prem = set(premise_concepts)
    hyp = set(hypothesis_concepts)
    if hyp < prem:
        return "entailment"
    if not (hyp & prem):
        return "contradiction"
    return "neutral"


def _render(
    concepts: Sequence[int],
    surface: np.ndarray,
    noise: np.ndarray,
    noise_rate: float,
    rng: np.random.Generator,
) -> tuple[int, ...]:
    """Surface tokens for a concept sequence with function tokens mixed in."""
    tokens: list[int] = []
    for c in concepts:
        if noise_rate > 0.0 and rng.random() < noise_rate:
            tokens.append(int(noise[rng.integers(len(noise))]))
        tokens.append(int(surface[c]))
    return tuple(tokens)


def _reorder(concepts: tuple[int, ...], rule: str) -> tuple[int, ...]:
    if rule == "reverse":
        return concepts[::-1]
    if rule == "identity":
        return concepts
    raise ConfigError(f"reorder_b must be 'reverse' or 'identity' (got {rule!r})")


class _ConceptSampler:
    """Draws distinct-concept sequences whose sets are unique (and optionally
    low-overlap) across everything sampled so far."""

    def __init__(self, lexicon: ConceptLexicon, rng: np.random.Generator, max_overlap: float = 1.0):
        self.lexicon = lexicon
        self.rng = rng
        self.max_overlap = max_overlap  # reject Jaccard >= this vs existing sets
        self.seen: list[frozenset[int]] = []
        self._seen_lookup: set[frozenset[int]] = set()

    def draw(self, length: int) -> tuple[int, ...]:
        if length > self.lexicon.concept_count:
            raise ConfigError(
                f"sentence length {length} exceeds concept inventory {self.lexicon.concept_count}"
            )
        for _ in range(_MAX_SAMPLING_ATTEMPTS):
            seq = tuple(
                int(c) for c in self.rng.choice(self.lexicon.concept_count, size=length, replace=False)
            )
            cand = frozenset(seq)
            if self._acceptable(cand):
                self.seen.append(cand)
                self._seen_lookup.add(cand)
                return seq
        raise ConfigError(
            "could not sample a sufficiently distinct concept sequence; "
            "increase concept_count or reduce corpus size"
        )

    def _acceptable(self, cand: frozenset[int]) -> bool:
        if self.max_overlap >= 1.0:
            # only exact duplicates are rejected; hash lookup suffices
            return cand not in self._seen_lookup
        return all(self._jaccard(cand, s) < self.max_overlap for s in self.seen)

    @staticmethod
    def _jaccard(a: frozenset[int], b: frozenset[int]) -> float:
        return len(a & b) / len(a | b)


def _check_len_range(len_range: tuple[int, int]) -> None:
    lo, hi = len_range
    if not (3 <= lo <= hi <= 20):
        raise ConfigError(f"len_range must satisfy 3 <= lo <= hi <= 20 (got {len_range})")


def gen_parallel_corpus(
    lexicon: ConceptLexicon,
    n_train: int = 5000,
    n_val: int = 500,
    n_test: int = 1000,
    len_range: tuple[int, int] = (3, 10),
    noise_rate: float = 0.1,
    seed: int = 0,
    reorder_b: str = "reverse",
) -> ParallelCorpus:
    """Aligned pairs across all three splits, deterministic in the seed."""
    if n_train < 1:
        raise ConfigError(f"n_train must be >= 1 (got {n_train})")
    if n_val < 0 or n_test < 0:
        raise ConfigError("n_val and n_test must be >= 0")
    _check_len_range(len_range)
    if not (0.0 <= noise_rate < 1.0):
        raise ConfigError(f"noise_rate must be in [0, 1) (got {noise_rate})")

    rng = np.random.default_rng(seed)
    sampler = _ConceptSampler(lexicon, rng)
    corpus = ParallelCorpus()
    for split, count in (("train", n_train), ("validation", n_val), ("test", n_test)):
        for _ in range(count):
            length = int(rng.integers(len_range[0], len_range[1] + 1))
            concepts = sampler.draw(length)
            tokens_a = _render(concepts, lexicon.surface_a, lexicon.noise_a, noise_rate, rng)
            tokens_b = _render(
                _reorder(concepts, reorder_b), lexicon.surface_b, lexicon.noise_b, noise_rate, rng
            )
            corpus.pairs.append(PairExample(tokens_a, tokens_b, concepts, split))
    return corpus


def gen_mining_corpus(
    lexicon: ConceptLexicon,
    n_a: int = 400,
    n_b: int = 400,
    parallel_fraction: float = 0.1,
    seed: int = 0,
    len_range: tuple[int, int] = (3, 10),
    noise_rate: float = 0.1,
    reorder_b: str = "reverse",
) -> MiningCorpus:
    """Partially parallel collections with recorded gold pairs.

    Concept sets are rejected until every cross-side non-gold pair shares
    less than half of its concepts (Jaccard < 0.5), which a final scan
    re-verifies.
    """
    if not (0.0 < parallel_fraction < 1.0):
        raise ConfigError(f"parallel_fraction must be in (0, 1) (got {parallel_fraction})")
    if n_a < 1 or n_b < 1:
        raise ConfigError("mining sides must be non-empty")
    _check_len_range(len_range)

    rng = np.random.default_rng(seed)
    sampler = _ConceptSampler(lexicon, rng, max_overlap=0.5)
    n_gold = int(parallel_fraction * min(n_a, n_b))

    seqs_a: list[tuple[int, ...]] = []
    seqs_b: list[tuple[int, ...]] = []
    gold_seq_ids: list[int] = []
    for _ in range(n_gold):
        length = int(rng.integers(len_range[0], len_range[1] + 1))
        concepts = sampler.draw(length)
        gold_seq_ids.append(len(seqs_a))
        seqs_a.append(_render(concepts, lexicon.surface_a, lexicon.noise_a, noise_rate, rng))
        seqs_b.append(_render(
            _reorder(concepts, reorder_b), lexicon.surface_b, lexicon.noise_b, noise_rate, rng
        ))
    concept_sets_a = [sampler.seen[i] for i in range(n_gold)]
    concept_sets_b = list(concept_sets_a)
    while len(seqs_a) < n_a:
        length = int(rng.integers(len_range[0], len_range[1] + 1))
        concepts = sampler.draw(length)
        seqs_a.append(_render(concepts, lexicon.surface_a, lexicon.noise_a, noise_rate, rng))
        concept_sets_a.append(frozenset(concepts))
    while len(seqs_b) < n_b:
        length = int(rng.integers(len_range[0], len_range[1] + 1))
        concepts = sampler.draw(length)
        seqs_b.append(_render(
            _reorder(concepts, reorder_b), lexicon.surface_b, lexicon.noise_b, noise_rate, rng
        ))
        concept_sets_b.append(frozenset(concepts))

    pos_a = rng.permutation(n_a)
    pos_b = rng.permutation(n_b)
    side_a: list[tuple[int, ...]] = [()] * n_a
    side_b: list[tuple[int, ...]] = [()] * n_b
    for src, dst in enumerate(pos_a):
        side_a[dst] = seqs_a[src]
    for src, dst in enumerate(pos_b):
        side_b[dst] = seqs_b[src]
    gold_pairs = [(int(pos_a[i]), int(pos_b[i])) for i in gold_seq_ids]

    _audit_overlap(concept_sets_a, concept_sets_b, pos_a, pos_b, set(gold_pairs))
    return MiningCorpus(side_a, side_b, gold_pairs, parallel_fraction)


def _audit_overlap(
    sets_a: list[frozenset[int]],
    sets_b: list[frozenset[int]],
    pos_a: np.ndarray,
    pos_b: np.ndarray,
    gold: set[tuple[int, int]],
) -> None:
    """Cross-check that every non-gold cross pair shares < 50% of concepts."""
    placed_a = {int(pos_a[i]): s for i, s in enumerate(sets_a)}
    placed_b = {int(pos_b[j]): s for j, s in enumerate(sets_b)}
    for i, sa in placed_a.items():
        for j, sb in placed_b.items():
            if (i, j) in gold:
                continue
            if len(sa & sb) / len(sa | sb) >= 0.5:
                raise ConfigError(
                    f"generation audit failed: non-gold pair ({i}, {j}) shares >= 50% of concepts"
                )


def gen_sts_pairs(
    lexicon: ConceptLexicon,
    n: int = 500,
    seed: int = 0,
    len_range: tuple[int, int] = (3, 8),
    noise_rate: float = 0.1,
) -> list[StsPair]:
    """Same-language sentence pairs with Jaccard-of-concepts gold scores.

    Overlap sizes are drawn uniformly from full-identity down to disjoint,
    so the gold values spread across [0, 1].
    """
    if n < 1:
        raise ConfigError(f"n must be >= 1 (got {n})")
    _check_len_range(len_range)
    rng = np.random.default_rng(seed)
    pairs: list[StsPair] = []
    for _ in range(n):
        length = int(rng.integers(len_range[0], len_range[1] + 1))
        s1 = tuple(int(c) for c in rng.choice(lexicon.concept_count, size=length, replace=False))
        overlap = int(rng.integers(0, length + 1))
        shared = list(s1[:overlap])
        remaining = np.setdiff1d(np.arange(lexicon.concept_count), np.array(s1, dtype=np.intp))
        fresh = [int(c) for c in rng.choice(remaining, size=length - overlap, replace=False)]
        s2 = tuple(shared + fresh)
        gold = overlap / len(set(s1) | set(s2))
        pairs.append(
            StsPair(
                _render(s1, lexicon.surface_a, lexicon.noise_a, noise_rate, rng),
                _render(s2, lexicon.surface_a, lexicon.noise_a, noise_rate, rng),
                gold,
            )
        )
    return pairs


def gen_nli_triples(
    lexicon: ConceptLexicon,
    n: int = 1000,
    seed: int = 0,
    len_range: tuple[int, int] = (3, 8),
    noise_rate: float = 0.1,
) -> list[NliTriple]:
    """Premise/hypothesis pairs with labels balanced by round-robin construction."""
    if n < 1:
        raise ConfigError(f"n must be >= 1 (got {n})")
    _check_len_range(len_range)
    rng = np.random.default_rng(seed)
    triples: list[NliTriple] = []
    all_concepts = np.arange(lexicon.concept_count)
    for i in range(n):
        want = NLI_LABELS[i % len(NLI_LABELS)]
        length = int(rng.integers(len_range[0], len_range[1] + 1))
        prem = tuple(int(c) for c in rng.choice(lexicon.concept_count, size=length, replace=False))
        if want == "entailment":
            size = int(rng.integers(1, length))
            keep = sorted(rng.choice(length, size=size, replace=False))
            hyp = tuple(prem[k] for k in keep)
        elif want == "contradiction":
            pool = np.setdiff1d(all_concepts, np.array(prem, dtype=np.intp))
            hlen = int(rng.integers(len_range[0], len_range[1] + 1))
            hyp = tuple(int(c) for c in rng.choice(pool, size=hlen, replace=False))
        else:
            shared_n = int(rng.integers(1, length))
            shared = list(prem[:shared_n])
            pool = np.setdiff1d(all_concepts, np.array(prem, dtype=np.intp))
            fresh_n = int(rng.integers(1, len_range[1]))
            fresh = [int(c) for c in rng.choice(pool, size=fresh_n, replace=False)]
            hyp = tuple(shared + fresh)
        assert nli_label(prem, hyp) == want
        triples.append(
            NliTriple(
                _render(prem, lexicon.surface_a, lexicon.noise_a, noise_rate, rng),
                _render(hyp, lexicon.surface_a, lexicon.noise_a, noise_rate, rng),
                want,
            )
        )
    return triples


# ---------------------------------------------------------------------------
# File formats. Parallel corpora are TSV: one pair per line,
# `a_tokens<TAB>b_tokens<TAB>concept_ids<TAB>split`, tokens space-separated
# integers, UTF-8, LF line endings. Similarity / inference files carry their
# gold column in the last field. Mining corpora are JSON.
# ---------------------------------------------------------------------------


def _ints(fieldtext: str, path: str, lineno: int) -> tuple[int, ...]:
    try:
        values = tuple(int(t) for t in fieldtext.split())
    except ValueError as e:
        raise CorpusParseError(f"{path}:{lineno}: non-integer token field {fieldtext!r}") from e
    if not values:
        raise CorpusParseError(f"{path}:{lineno}: empty token field")
    return values


def _read_rows(path: str, n_cols: int) -> list[tuple[int, list[str]]]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    rows = []
    for lineno, line in enumerate(lines, start=1):
        if not line:
            continue
        cols = line.split("\t")
        if len(cols) != n_cols:
            raise CorpusParseError(f"{path}:{lineno}: expected {n_cols} columns, got {len(cols)}")
        rows.append((lineno, cols))
    if not rows:
        raise EmptyCorpusError(f"{path}: no records")
    return rows


def save_tsv(corpus: ParallelCorpus, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in corpus.pairs:
            fh.write(
                " ".join(map(str, p.tokens_a))
                + "\t"
                + " ".join(map(str, p.tokens_b))
                + "\t"
                + " ".join(map(str, p.concepts))
                + "\t"
                + p.split
                + "\n"
            )


def load_tsv(path: str) -> ParallelCorpus:
    corpus = ParallelCorpus()
    for lineno, cols in _read_rows(path, 4):
        if cols[3] not in SPLITS:
            raise CorpusParseError(f"{path}:{lineno}: unknown split {cols[3]!r}")
        corpus.pairs.append(
            PairExample(
                _ints(cols[0], path, lineno),
                _ints(cols[1], path, lineno),
                _ints(cols[2], path, lineno),
                cols[3],
            )
        )
    return corpus


def save_sts_tsv(pairs: Sequence[StsPair], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in pairs:
            fh.write(
                " ".join(map(str, p.tokens_1))
                + "\t"
                + " ".join(map(str, p.tokens_2))
                + "\t"
                + repr(p.gold_sim)
                + "\n"
            )


def load_sts_tsv(path: str) -> list[StsPair]:
    pairs = []
    for lineno, cols in _read_rows(path, 3):
        try:
            gold = float(cols[2])
        except ValueError as e:
            raise CorpusParseError(f"{path}:{lineno}: bad gold similarity {cols[2]!r}") from e
        pairs.append(StsPair(_ints(cols[0], path, lineno), _ints(cols[1], path, lineno), gold))
    return pairs


def save_nli_tsv(triples: Sequence[NliTriple], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in triples:
            fh.write(
                " ".join(map(str, t.premise))
                + "\t"
                + " ".join(map(str, t.hypothesis))
                + "\t"
                + t.label
                + "\n"
            )


def load_nli_tsv(path: str) -> list[NliTriple]:
    triples = []
    for lineno, cols in _read_rows(path, 3):
        if cols[2] not in NLI_LABELS:
            raise CorpusParseError(f"{path}:{lineno}: unknown label {cols[2]!r}")
        triples.append(NliTriple(_ints(cols[0], path, lineno), _ints(cols[1], path, lineno), cols[2]))
    return triples


def save_mining_json(corpus: MiningCorpus, path: str) -> None:
    doc = {
        "side_a": [list(s) for s in corpus.side_a],
        "side_b": [list(s) for s in corpus.side_b],
        "gold_pairs": [list(p) for p in corpus.gold_pairs],
        "parallel_fraction": corpus.parallel_fraction,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_mining_json(path: str) -> MiningCorpus:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise CorpusParseError(f"{path}: invalid JSON ({e})") from e
    try:
        return MiningCorpus(
            side_a=[tuple(int(t) for t in s) for s in doc["side_a"]],
            side_b=[tuple(int(t) for t in s) for s in doc["side_b"]],
            gold_pairs=[(int(i), int(j)) for i, j in doc["gold_pairs"]],
            parallel_fraction=float(doc["parallel_fraction"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise CorpusParseError(f"{path}: malformed mining corpus ({e})") from e
