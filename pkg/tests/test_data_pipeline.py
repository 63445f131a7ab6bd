"""Vocabulary, corruption statistics, pair packing, and batch invariants."""

import numpy as np
import pytest

from hybridbert.data import (
    CLS_ID,
    IGNORE_LABEL,
    MASK_ID,
    NUM_RESERVED,
    PAD_ID,
    SEP_ID,
    UNK_ID,
    CorruptionConfig,
    DocStore,
    TokenBatch,
    Vocab,
    build_vocab,
    collate_batch,
    corrupt_mlm,
    make_batch,
    make_sso_example,
    pack_pair,
    read_documents,
    rng_for_batch,
    synthesize_bigram_corpus,
)


# -- vocabulary -----------------------------------------------------------------


def test_reserved_ids_are_pinned():
    v = Vocab(["alpha", "beta"])
    assert (PAD_ID, CLS_ID, SEP_ID, MASK_ID, UNK_ID) == (0, 1, 2, 3, 4)
    assert v.token_of(0) == "[PAD]" and v.token_of(4) == "[UNK]"
    assert v.id_of("alpha") == NUM_RESERVED
    assert v.size == NUM_RESERVED + 2


def test_unknown_tokens_fall_back_to_unk():
    v = Vocab(["alpha"])
    np.testing.assert_array_equal(v.encode("alpha missing alpha"),
                                  [NUM_RESERVED, UNK_ID, NUM_RESERVED])


def test_vocab_rejects_reserved_collisions_and_duplicates():
    with pytest.raises(ValueError):
        Vocab(["[MASK]"])
    with pytest.raises(ValueError):
        Vocab(["dup", "dup"])


def test_build_vocab_frequency_order_with_first_occurrence_ties():
    lines = ["b a a", "c b a", "c d"]
    v = build_vocab(lines, max_size=NUM_RESERVED + 3)
    # a:3, b:2, c:2 (b first seen before c), d dropped by the cap
    assert [v.token_of(NUM_RESERVED + i) for i in range(3)] == ["a", "b", "c"]
    assert v.id_of("d") == UNK_ID


def test_build_vocab_rejects_empty_and_tiny_caps():
    with pytest.raises(ValueError):
        build_vocab([], max_size=100)
    with pytest.raises(ValueError):
        build_vocab(["a"], max_size=NUM_RESERVED)


def test_vocab_save_load_round_trip(tmp_path):
    v = build_vocab(["x y z y y z"], max_size=64)
    p = tmp_path / "vocab.txt"
    v.save(p)
    w = Vocab.load(p)
    assert w.size == v.size
    assert all(w.token_of(i) == v.token_of(i) for i in range(v.size))
    # file layout: one token per line, line number = id - reserved count
    assert p.read_text().splitlines()[0] == v.token_of(NUM_RESERVED)


# -- MLM corruption -------------------------------------------------------------


def test_corruption_config_validation():
    with pytest.raises(ValueError):
        CorruptionConfig(mask_rate=0.0)
    with pytest.raises(ValueError):
        CorruptionConfig(frac_mask=0.7, frac_random=0.1, frac_keep=0.1)


def test_special_tokens_never_corrupted_and_labels_align():
    rng = np.random.default_rng(0)
    cfg = CorruptionConfig(mask_rate=0.9)
    ids = np.array([CLS_ID, 7, 8, SEP_ID, 9, 10, SEP_ID, PAD_ID, PAD_ID])
    for _ in range(200):
        corrupted, labels, masked = corrupt_mlm(ids, cfg, rng, vocab_size=32)
        special = ids < NUM_RESERVED
        assert np.array_equal(corrupted[special], ids[special])
        assert np.all(labels[special] == IGNORE_LABEL)
        selected = labels != IGNORE_LABEL
        assert np.array_equal(labels[selected], ids[selected])
        assert np.array_equal(masked, corrupted == MASK_ID)
        # random replacements are never reserved ids
        replaced = selected & ~masked & (corrupted != ids)
        assert np.all(corrupted[replaced] >= NUM_RESERVED)


@pytest.mark.parametrize("rate", [0.05, 0.15, 0.30, 0.75])
def test_corruption_rates_on_two_hundred_thousand_tokens(rate):
    rng = np.random.default_rng(42)
    cfg = CorruptionConfig(mask_rate=rate)
    ids = rng.integers(NUM_RESERVED, 500, size=200_000)
    corrupted, labels, masked = corrupt_mlm(ids, cfg, rng, vocab_size=500)
    selected = labels != IGNORE_LABEL
    n_sel = selected.sum()
    assert abs(n_sel / ids.size - rate) < 0.005 * (rate / 0.15)
    frac_mask = masked.sum() / n_sel
    frac_keep = (selected & (corrupted == ids)).sum() / n_sel
    frac_rand = 1.0 - frac_mask - frac_keep
    assert abs(frac_mask - 0.8) < 0.015
    assert abs(frac_rand - 0.1) < 0.015
    assert abs(frac_keep - 0.1) < 0.015


def test_keep_positions_still_carry_labels():
    # the 10% kept-unchanged positions must still be predicted
    rng = np.random.default_rng(3)
    cfg = CorruptionConfig(mask_rate=0.5, frac_mask=0.0, frac_random=0.0, frac_keep=1.0)
    ids = rng.integers(NUM_RESERVED, 100, size=10_000)
    corrupted, labels, masked = corrupt_mlm(ids, cfg, rng, vocab_size=100)
    assert np.array_equal(corrupted, ids)
    assert not masked.any()
    assert (labels != IGNORE_LABEL).sum() > 4000


# -- documents, pairs, packing --------------------------------------------------


def test_read_documents_blank_line_delimited(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("a b\nc d\n\n\ne f\n")
    assert read_documents(p) == [["a b", "c d"], ["e f"]]
    (tmp_path / "empty.txt").write_text("\n\n")
    with pytest.raises(ValueError):
        read_documents(tmp_path / "empty.txt")


def test_doc_store_split_takes_tail_documents():
    docs = [[np.array([i + NUM_RESERVED])] for i in range(10)]
    store = DocStore(docs)
    train, evl = store.split(0.2)
    assert (len(train), len(evl)) == (8, 2)
    assert evl.docs[0][0][0] == 8 + NUM_RESERVED
    with pytest.raises(ValueError):
        DocStore(docs[:1]).split(0.9)


def test_sso_classes_reflect_actual_adjacency():
    rng = np.random.default_rng(5)
    docs = [
        [np.array([10, 11]), np.array([12, 13]), np.array([14])],
        [np.array([20]), np.array([21])],
        [np.array([30])],
    ]
    store = DocStore(docs)
    flat = {tuple(s): (d, i) for d, doc in enumerate(docs) for i, s in enumerate(doc)}
    seen = set()
    for _ in range(300):
        a, b, label = make_sso_example(store, rng)
        da, ia = flat[tuple(a)]
        db, ib = flat[tuple(b)]
        seen.add(label)
        if label == 0:
            assert da == db and ib == ia + 1
        elif label == 1:
            assert da == db and ib == ia - 1
        else:
            assert da != db
    assert seen == {0, 1, 2}


def test_sso_labels_roughly_uniform():
    rng = np.random.default_rng(6)
    docs = [[np.array([10]), np.array([11])], [np.array([20]), np.array([21])]]
    store = DocStore(docs)
    labels = np.array([make_sso_example(store, rng)[2] for _ in range(3000)])
    for c in range(3):
        assert abs((labels == c).mean() - 1 / 3) < 0.03


def test_sso_needs_enough_structure():
    rng = np.random.default_rng(7)
    with pytest.raises(ValueError):
        make_sso_example(DocStore([[np.array([10]), np.array([11])]]), rng)


def test_pack_pair_layout_and_segments():
    ids, segs = pack_pair(np.array([10, 11]), np.array([20, 21, 22]), max_len=16)
    np.testing.assert_array_equal(ids, [CLS_ID, 10, 11, SEP_ID, 20, 21, 22, SEP_ID])
    np.testing.assert_array_equal(segs, [0, 0, 0, 0, 1, 1, 1, 1])


def test_pack_pair_truncates_longest_first():
    a = np.arange(10) + 10
    b = np.arange(4) + 40
    ids, segs = pack_pair(a, b, max_len=11)
    # 10 + 4 + 3 = 17 tokens shrink to 11 by trimming A (the longer side)
    assert len(ids) == 11
    np.testing.assert_array_equal(ids[1:5], [10, 11, 12, 13])
    assert (segs == 1).sum() == 5  # all of B plus the final [SEP]
    with pytest.raises(ValueError):
        pack_pair(a, b, max_len=4)


def test_pack_pair_degenerate_budget_drains_both_sides():
    ids, _ = pack_pair(np.arange(8) + 10, np.arange(8) + 30, max_len=5)
    assert len(ids) == 5
    assert ids[0] == CLS_ID and (ids == SEP_ID).sum() == 2


# -- batches ----------------------------------------------------------------------


def _tiny_store():
    rng = np.random.default_rng(8)
    docs = [[rng.integers(NUM_RESERVED, 60, size=rng.integers(4, 9)) for _ in range(4)]
            for _ in range(6)]
    return DocStore(docs)


def test_make_batch_invariants_hold_across_seeds():
    store = _tiny_store()
    cfg = CorruptionConfig(mask_rate=0.3)
    for k in range(20):
        batch = make_batch(store, 8, 24, cfg, rng_for_batch(1, k), vocab_size=60)
        batch.validate()
        assert batch.input_ids.shape == (8, 24)
        # every row is [CLS] ... with two [SEP]s and right padding only
        assert np.all(batch.input_ids[:, 0] == CLS_ID)
        assert np.all((batch.input_ids == SEP_ID).sum(axis=1) == 2)
        pad = batch.padding_mask
        real_len = (~pad).sum(axis=1)
        for i in range(8):
            assert not pad[i, : real_len[i]].any() and pad[i, real_len[i]:].all()


def test_validate_catches_broken_invariants():
    store = _tiny_store()
    batch = make_batch(store, 4, 24, CorruptionConfig(), rng_for_batch(2, 0), 60)
    bad = TokenBatch(batch.input_ids.copy(), batch.segment_ids, batch.padding_mask,
                     batch.mlm_labels, ~batch.mask_positions, batch.sso_labels)
    with pytest.raises(AssertionError):
        bad.validate()
    bad2 = TokenBatch(batch.input_ids, batch.segment_ids, batch.padding_mask,
                      batch.mlm_labels, batch.mask_positions,
                      np.full_like(batch.sso_labels, 3))
    with pytest.raises(AssertionError):
        bad2.validate()


def test_collate_rejects_overlong_examples():
    ids = np.arange(30) + NUM_RESERVED
    segs = np.zeros(30, dtype=np.int64)
    with pytest.raises(ValueError):
        collate_batch([(ids, segs, 0)], max_len=16, cfg=CorruptionConfig(),
                      rng=np.random.default_rng(0), vocab_size=64)


def test_rng_for_batch_is_pure_in_seed_and_index():
    a = rng_for_batch(11, 3).integers(0, 1_000_000, size=8)
    b = rng_for_batch(11, 3).integers(0, 1_000_000, size=8)
    c = rng_for_batch(11, 4).integers(0, 1_000_000, size=8)
    d = rng_for_batch(12, 3).integers(0, 1_000_000, size=8)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c) and not np.array_equal(a, d)


def test_identical_batches_from_identical_streams():
    store = _tiny_store()
    cfg = CorruptionConfig()
    x = make_batch(store, 4, 24, cfg, rng_for_batch(5, 9), 60)
    y = make_batch(store, 4, 24, cfg, rng_for_batch(5, 9), 60)
    for f in ("input_ids", "segment_ids", "padding_mask", "mlm_labels",
              "mask_positions", "sso_labels"):
        np.testing.assert_array_equal(getattr(x, f), getattr(y, f))


# -- synthetic corpus ------------------------------------------------------------


def test_synthesized_corpus_is_deterministic_and_learnable(tmp_path):
    p1 = synthesize_bigram_corpus(tmp_path / "a.txt", num_sentences=300,
                                  vocab_words=50, seed=123)
    p2 = synthesize_bigram_corpus(tmp_path / "b.txt", num_sentences=300,
                                  vocab_words=50, seed=123)
    assert p1.read_text() == p2.read_text()

    docs = read_documents(p1)
    sents = [s.split() for d in docs for s in d]
    assert len(sents) == 300
    assert all(len(d) >= 1 for d in docs)

    # each word should admit few successors: that is the learnable signal
    succ: dict[str, set] = {}
    for s in sents:
        for w, nxt in zip(s, s[1:]):
            succ.setdefault(w, set()).add(nxt)
    branching = np.array([len(v) for v in succ.values()])
    assert branching.max() <= 4

    # skewed unigram distribution: the top decile must dominate
    from collections import Counter
    counts = Counter(w for s in sents for w in s)
    top = sum(c for _, c in counts.most_common(5))
    assert top / sum(counts.values()) > 0.3


def test_bundled_corpus_meets_size_contract():
    import pathlib
    root = pathlib.Path(__file__).resolve().parents[1]
    corpus = root / "data" / "synthetic_bigram.txt"
    assert corpus.exists(), "bundled corpus missing"
    lines = corpus.read_text().splitlines()
    assert len(lines) >= 5000
    docs = read_documents(corpus)
    vocab = build_vocab((s for d in docs for s in d), 512)
    assert vocab.size <= 512
