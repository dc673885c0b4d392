import pytest

from dualmoco import datagen
from dualmoco.datagen import (
    gen_mining_corpus,
    gen_nli_triples,
    gen_parallel_corpus,
    gen_sts_pairs,
    load_mining_json,
    load_nli_tsv,
    load_sts_tsv,
    load_tsv,
    make_lexicon,
    nli_label,
    save_mining_json,
    save_nli_tsv,
    save_sts_tsv,
    save_tsv,
)
from dualmoco.errors import ConfigError, CorpusParseError, EmptyCorpusError


@pytest.fixture(scope="module")
def lexicon():
    return make_lexicon(concept_count=60, noise_count=8, seed=0)


def recover_concepts(tokens, surface, noise):
    """Invert a surface map, dropping function tokens."""
    inverse = {int(t): c for c, t in enumerate(surface)}
    noise_set = {int(t) for t in noise}
    out = []
    for t in tokens:
        if t in noise_set:
            continue
        out.append(inverse[t])
    return out


class TestLexicon:
    def test_bijective_surface_maps(self, lexicon):
        assert len(set(lexicon.surface_a.tolist())) == lexicon.concept_count
        assert len(set(lexicon.surface_b.tolist())) == lexicon.concept_count

    def test_noise_disjoint_from_concepts(self, lexicon):
        assert not set(lexicon.surface_a.tolist()) & set(lexicon.noise_a.tolist())
        assert not set(lexicon.surface_b.tolist()) & set(lexicon.noise_b.tolist())

    def test_vocab_sizes(self, lexicon):
        assert lexicon.vocab_size_a == 68
        assert lexicon.vocab_size_b == 68

    def test_all_token_ids_in_range(self, lexicon):
        for ids in (lexicon.surface_a, lexicon.noise_a):
            assert ids.min() >= 0 and ids.max() < lexicon.vocab_size_a


class TestGenParallelCorpus:
    def test_same_seed_byte_identical(self, lexicon, tmp_path):
        c1 = gen_parallel_corpus(lexicon, 40, 10, 10, seed=5)
        c2 = gen_parallel_corpus(lexicon, 40, 10, 10, seed=5)
        p1, p2 = tmp_path / "a.tsv", tmp_path / "b.tsv"
        save_tsv(c1, str(p1))
        save_tsv(c2, str(p2))
        assert p1.read_bytes() == p2.read_bytes()

    def test_different_seeds_differ(self, lexicon):
        c1 = gen_parallel_corpus(lexicon, 40, 0, 0, seed=5)
        c2 = gen_parallel_corpus(lexicon, 40, 0, 0, seed=6)
        assert [p.tokens_a for p in c1.pairs] != [p.tokens_a for p in c2.pairs]

    def test_pair_sides_share_concept_multiset(self, lexicon):
        corpus = gen_parallel_corpus(lexicon, 50, 0, 0, seed=7)
        for p in corpus.pairs:
            got_a = recover_concepts(p.tokens_a, lexicon.surface_a, lexicon.noise_a)
            got_b = recover_concepts(p.tokens_b, lexicon.surface_b, lexicon.noise_b)
            assert sorted(got_a) == sorted(got_b) == sorted(p.concepts)

    def test_reversed_word_order_on_side_b(self, lexicon):
        corpus = gen_parallel_corpus(lexicon, 20, 0, 0, noise_rate=0.0, seed=8)
        for p in corpus.pairs:
            got_b = recover_concepts(p.tokens_b, lexicon.surface_b, lexicon.noise_b)
            assert tuple(got_b) == p.concepts[::-1]

    def test_no_noise_identity_reorder_equal_lengths(self, lexicon):
        corpus = gen_parallel_corpus(
            lexicon, 30, 0, 0, noise_rate=0.0, seed=9, reorder_b="identity"
        )
        for p in corpus.pairs:
            assert len(p.tokens_a) == len(p.tokens_b)
            got_b = recover_concepts(p.tokens_b, lexicon.surface_b, lexicon.noise_b)
            assert tuple(got_b) == p.concepts

    def test_split_sizes_and_tags(self, lexicon):
        corpus = gen_parallel_corpus(lexicon, 12, 5, 7, seed=10)
        assert len(corpus.split("train")) == 12
        assert len(corpus.split("validation")) == 5
        assert len(corpus.split("test")) == 7

    def test_split_hygiene_hash_audit(self, lexicon):
        corpus = gen_parallel_corpus(lexicon, 40, 20, 20, seed=11)
        per_split = {
            name: {hash(tuple(p.concepts)) for p in corpus.split(name)}
            for name in ("train", "validation", "test")
        }
        assert not per_split["train"] & per_split["validation"]
        assert not per_split["train"] & per_split["test"]
        assert not per_split["validation"] & per_split["test"]

    def test_separability_gold_is_unique_jaccard_max(self, lexicon):
        # brute-force audit: each side-A sentence's highest concept-Jaccard
        # match on side B is its own partner, uniquely
        corpus = gen_parallel_corpus(lexicon, 60, 0, 0, seed=12)
        sets = [set(p.concepts) for p in corpus.pairs]
        for i, si in enumerate(sets):
            jac = [len(si & sj) / len(si | sj) for sj in sets]
            best = max(range(len(sets)), key=lambda j: jac[j])
            assert best == i
            assert sum(1 for j in jac if j == jac[i]) == 1

    def test_length_range_enforced(self, lexicon):
        corpus = gen_parallel_corpus(lexicon, 40, 0, 0, len_range=(4, 6), noise_rate=0.0, seed=13)
        for p in corpus.pairs:
            assert 4 <= len(p.concepts) <= 6
            assert len(p.tokens_a) == len(p.concepts)

    def test_validation(self, lexicon):
        with pytest.raises(ConfigError):
            gen_parallel_corpus(lexicon, 0, 0, 0)
        with pytest.raises(ConfigError):
            gen_parallel_corpus(lexicon, 5, 0, 0, len_range=(1, 5))
        with pytest.raises(ConfigError):
            gen_parallel_corpus(lexicon, 5, 0, 0, noise_rate=1.5)
        with pytest.raises(ConfigError):
            gen_parallel_corpus(lexicon, 5, 0, 0, reorder_b="shuffle")


class TestGenMiningCorpus:
    def test_gold_count_exact(self, lexicon):
        mining = gen_mining_corpus(lexicon, 50, 40, 0.2, seed=14)
        assert len(mining.gold_pairs) == int(0.2 * 40)
        assert len(mining.side_a) == 50 and len(mining.side_b) == 40

    def test_gold_pairs_share_concepts(self, lexicon):
        mining = gen_mining_corpus(lexicon, 40, 40, 0.15, seed=15)
        for i, j in mining.gold_pairs:
            got_a = recover_concepts(mining.side_a[i], lexicon.surface_a, lexicon.noise_a)
            got_b = recover_concepts(mining.side_b[j], lexicon.surface_b, lexicon.noise_b)
            assert sorted(got_a) == sorted(got_b)

    def test_non_gold_overlap_below_half(self, lexicon):
        # direct concept-overlap scan over every cross pair
        mining = gen_mining_corpus(lexicon, 30, 30, 0.2, seed=16)
        gold = set(mining.gold_pairs)
        sets_a = [
            set(recover_concepts(s, lexicon.surface_a, lexicon.noise_a)) for s in mining.side_a
        ]
        sets_b = [
            set(recover_concepts(s, lexicon.surface_b, lexicon.noise_b)) for s in mining.side_b
        ]
        for i, sa in enumerate(sets_a):
            for j, sb in enumerate(sets_b):
                if (i, j) in gold:
                    assert sa == sb
                else:
                    assert len(sa & sb) / len(sa | sb) < 0.5

    def test_parallel_fraction_validated(self, lexicon):
        with pytest.raises(ConfigError):
            gen_mining_corpus(lexicon, 10, 10, 0.0)
        with pytest.raises(ConfigError):
            gen_mining_corpus(lexicon, 10, 10, 1.0)

    def test_deterministic(self, lexicon):
        m1 = gen_mining_corpus(lexicon, 20, 20, 0.2, seed=17)
        m2 = gen_mining_corpus(lexicon, 20, 20, 0.2, seed=17)
        assert m1.side_a == m2.side_a and m1.gold_pairs == m2.gold_pairs


class TestGenStsPairs:
    def test_identical_sets_score_one(self):
        lexicon = make_lexicon(40, 4, seed=1)
        pairs = gen_sts_pairs(lexicon, 200, seed=18)
        perfect = [p for p in pairs if p.gold_sim == 1.0]
        assert perfect, "sampler should occasionally draw full overlap"

    def test_gold_is_jaccard_of_recovered_concepts(self, lexicon):
        pairs = gen_sts_pairs(lexicon, 100, seed=19)
        for p in pairs:
            c1 = set(recover_concepts(p.tokens_1, lexicon.surface_a, lexicon.noise_a))
            c2 = set(recover_concepts(p.tokens_2, lexicon.surface_a, lexicon.noise_a))
            assert p.gold_sim == pytest.approx(len(c1 & c2) / len(c1 | c2), abs=1e-12)

    def test_gold_spans_both_extremes(self, lexicon):
        pairs = gen_sts_pairs(lexicon, 300, seed=20)
        golds = [p.gold_sim for p in pairs]
        assert min(golds) == 0.0 and max(golds) == 1.0
        assert len({round(g, 6) for g in golds}) > 5


class TestGenNliTriples:
    def test_labels_match_rule(self, lexicon):
        triples = gen_nli_triples(lexicon, 120, seed=21)
        for t in triples:
            prem = recover_concepts(t.premise, lexicon.surface_a, lexicon.noise_a)
            hyp = recover_concepts(t.hypothesis, lexicon.surface_a, lexicon.noise_a)
            assert nli_label(prem, hyp) == t.label

    def test_roughly_balanced(self, lexicon):
        triples = gen_nli_triples(lexicon, 120, seed=22)
        counts = {label: 0 for label in datagen.NLI_LABELS}
        for t in triples:
            counts[t.label] += 1
        assert all(c == 40 for c in counts.values())

    def test_rule_definition(self):
        assert nli_label((1, 2, 3), (1, 2)) == "entailment"
        assert nli_label((1, 2, 3), (4, 5)) == "contradiction"
        assert nli_label((1, 2, 3), (1, 5)) == "neutral"
        assert nli_label((1, 2), (1, 2, 3)) == "neutral"  # superset is not entailment
        assert nli_label((1, 2), (1, 2)) == "neutral"  # equality is not strict subset


class TestFileRoundTrips:
    def test_parallel_round_trip(self, lexicon, tmp_path):
        corpus = gen_parallel_corpus(lexicon, 25, 5, 5, seed=23)
        path = tmp_path / "corpus.tsv"
        save_tsv(corpus, str(path))
        assert load_tsv(str(path)) == corpus

    def test_sts_round_trip(self, lexicon, tmp_path):
        pairs = gen_sts_pairs(lexicon, 30, seed=24)
        path = tmp_path / "sts.tsv"
        save_sts_tsv(pairs, str(path))
        assert load_sts_tsv(str(path)) == pairs

    def test_nli_round_trip(self, lexicon, tmp_path):
        triples = gen_nli_triples(lexicon, 30, seed=25)
        path = tmp_path / "nli.tsv"
        save_nli_tsv(triples, str(path))
        assert load_nli_tsv(str(path)) == triples

    def test_mining_round_trip(self, lexicon, tmp_path):
        mining = gen_mining_corpus(lexicon, 20, 20, 0.2, seed=26)
        path = tmp_path / "mining.json"
        save_mining_json(mining, str(path))
        assert load_mining_json(str(path)) == mining

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.tsv"
        path.write_text("")
        with pytest.raises(EmptyCorpusError):
            load_tsv(str(path))

    def test_wrong_column_count_cites_line(self, tmp_path):
        path = tmp_path / "bad.tsv"
        good = "1 2\t3 4\t5 6\ttrain"
        path.write_text("\n".join([good] * 6 + ["1 2\t3 4\ttrain"]) + "\n")
        with pytest.raises(CorpusParseError, match=r":7:"):
            load_tsv(str(path))

    def test_non_integer_token_cites_line(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("1 x\t3\t5\ttrain\n")
        with pytest.raises(CorpusParseError, match=r":1:"):
            load_tsv(str(path))

    def test_unknown_split_rejected(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("1\t2\t3\tdev\n")
        with pytest.raises(CorpusParseError, match="split"):
            load_tsv(str(path))

    def test_unknown_label_rejected(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("1\t2\tmaybe\n")
        with pytest.raises(CorpusParseError, match="label"):
            load_nli_tsv(str(path))

    def test_malformed_mining_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(CorpusParseError):
            load_mining_json(str(path))
        path.write_text('{"side_a": []}')
        with pytest.raises(CorpusParseError):
            load_mining_json(str(path))

    def test_lf_line_endings(self, lexicon, tmp_path):
        corpus = gen_parallel_corpus(lexicon, 5, 0, 0, seed=27)
        path = tmp_path / "corpus.tsv"
        save_tsv(corpus, str(path))
        raw = path.read_bytes()
        assert b"\r" not in raw
        assert raw.endswith(b"\n")
