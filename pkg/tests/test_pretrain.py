import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sstbert import encoder as E
from sstbert import pretrain as P
from sstbert import tensor as T
from sstbert.synthetic import random_sentence
from sstbert.tokenizer import CLS_ID, MASK_ID, NUM_SPECIALS, PAD_ID, SEP_ID, EncodedInput, build_vocab, encode


def encoded_of_length(n, max_len=None, rng=None, vocab_size=50):
    rng = rng or np.random.default_rng(0)
    max_len = max_len or n + 2
    body = rng.integers(NUM_SPECIALS, vocab_size, size=n).tolist()
    ids = [CLS_ID, *body, SEP_ID] + [PAD_ID] * (max_len - n - 2)
    mask = [1] * (n + 2) + [0] * (max_len - n - 2)
    return EncodedInput(tuple(ids), tuple(mask), (0,) * max_len)


@pytest.mark.parametrize("n, k", [(20, 3), (10, 2), (3, 1), (1, 1), (30, 5), (0, 0)])
def test_selection_count_rounds_half_up_with_floor(n, k):
    # 0.15 * 10 = 1.5 -> 2; 0.15 * 30 = 4.5 -> 5; tiny inputs keep one mask
    assert P.selection_count(n, 0.15) == k


def test_twenty_eligible_tokens_select_three():
    m = P.mlm_corrupt(encoded_of_length(20), 50, rng=np.random.default_rng(0))
    assert len(m.positions) == 3


def test_only_specials_is_not_an_error():
    enc = EncodedInput((CLS_ID, SEP_ID, PAD_ID), (1, 1, 0), (0, 0, 0))
    m = P.mlm_corrupt(enc, 50, rng=np.random.default_rng(0))
    assert m.positions == () and m.ids == enc.ids
    assert all(t == T.IGNORE_INDEX for t in m.targets)


@given(st.integers(0, 40), st.integers(0, 10), st.integers(0, 2**31 - 1))
@settings(max_examples=200)
def test_corruption_invariants(n, pad, seed):
    enc = encoded_of_length(n, n + 2 + pad, np.random.default_rng(seed))
    m = P.mlm_corrupt(enc, 50, rng=np.random.default_rng(seed))
    special = {i for i, t in enumerate(enc.ids) if t < NUM_SPECIALS}
    assert not special & set(m.positions)
    for i, (orig, new, tgt) in enumerate(zip(enc.ids, m.ids, m.targets)):
        if i in m.positions:
            assert tgt == orig
        else:
            assert tgt == T.IGNORE_INDEX and new == orig
    for pos, kind in zip(m.positions, m.kinds):
        if kind == P.MASKED:
            assert m.ids[pos] == MASK_ID
        elif kind == P.KEPT:
            assert m.ids[pos] == enc.ids[pos]
        else:
            assert NUM_SPECIALS <= m.ids[pos] < 50
    assert len(m.positions) == P.selection_count(n, 0.15)


def test_ignored_targets_contribute_nothing():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(6, 10))
    targets = np.array([3, T.IGNORE_INDEX, 4, T.IGNORE_INDEX, T.IGNORE_INDEX, 7])
    loss, g = T.cross_entropy(logits, targets)
    keep = targets != T.IGNORE_INDEX
    loss2, _ = T.cross_entropy(logits[keep], targets[keep])
    assert loss == pytest.approx(loss2)
    assert np.all(g[~keep] == 0)


def test_corruption_is_seed_deterministic():
    enc = encoded_of_length(30)
    a = P.mlm_corrupt(enc, 50, rng=np.random.default_rng(4))
    b = P.mlm_corrupt(enc, 50, rng=np.random.default_rng(4))
    assert a == b


def test_config_validation():
    with pytest.raises(ValueError):
        P.PretrainConfig(mask_rate=0.0)
    with pytest.raises(ValueError):
        P.PretrainConfig(split=(0.8, 0.1, 0.2))
    cfg = P.PretrainConfig.for_model(E.preset("roberta_base", "tiny"))
    base = P.PretrainConfig()
    assert not cfg.nsp_enabled and cfg.dynamic_masking
    assert (cfg.batch_size, cfg.max_steps) == (2 * base.batch_size, 2 * base.max_steps)
    assert P.PretrainConfig.for_model(E.preset("bert_base", "tiny")).batch_size == base.batch_size


# --- NSP


def test_nsp_forced_positive_pair():
    docs = [[["s1"], ["s2"]], [["t1"]]]
    rng = np.random.default_rng(0)
    for _ in range(200):
        p = P.sample_nsp_pair(docs, rng)
        if p.is_next:
            assert (p.a, p.b) == (("s1",), ("s2",))
        else:
            assert p.doc_b != p.doc_a


def test_nsp_degenerate_corpora():
    with pytest.raises(ValueError, match="two or more sentences"):
        P.sample_nsp_pair([[["only"]]], np.random.default_rng(0))
    with pytest.raises(ValueError, match="two documents"):
        P.sample_nsp_pair([[["a"], ["b"]]], np.random.default_rng(0))


def test_nsp_provenance_and_balance():
    rng = np.random.default_rng(1)
    docs = [[random_sentence(rng) for _ in range(int(rng.integers(1, 6)))] for _ in range(30)]
    pairs = [P.sample_nsp_pair(docs, rng) for _ in range(2000)]
    for p in pairs:
        assert p.a and p.b
        assert tuple(docs[p.doc_a][p.index_a]) == p.a and tuple(docs[p.doc_b][p.index_b]) == p.b
        if p.is_next:
            assert p.doc_a == p.doc_b and p.index_b == p.index_a + 1
    frac = np.mean([p.is_next for p in pairs])
    assert abs(frac - 0.5) < 4 * math.sqrt(0.25 / 2000)


# --- masking schedules


def _position_sets(examples, cfg, epoch):
    return [set(m.positions) for m in P.corrupt_epoch(examples, 60, cfg, epoch)]


def test_static_masking_repeats_every_epoch():
    rng = np.random.default_rng(0)
    ex = [encoded_of_length(int(rng.integers(3, 30)), 40, rng) for _ in range(50)]
    cfg = P.PretrainConfig(dynamic_masking=False, seed=3)
    first = P.corrupt_epoch(ex, 60, cfg, 0)
    for epoch in (1, 2, 7):
        assert P.corrupt_epoch(ex, 60, cfg, epoch) == first


def test_dynamic_masking_resamples():
    rng = np.random.default_rng(0)
    ex = [encoded_of_length(int(rng.integers(10, 40)), 42, rng) for _ in range(300)]
    cfg = P.PretrainConfig(dynamic_masking=True, seed=3)
    e0, e1 = _position_sets(ex, cfg, 0), _position_sets(ex, cfg, 1)
    differ = np.mean([a != b for a, b in zip(e0, e1)])
    assert differ >= 0.97
    assert _position_sets(ex, cfg, 1) == e1


def test_read_corpus_and_chunk(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("a b\nc d\n\n\ne f\n", encoding="utf-8")
    assert P.read_corpus(p) == [[["a", "b"], ["c", "d"]], [["e", "f"]]]
    docs = P.chunk_documents([["x"]] * 12, size=5)
    assert [len(d) for d in docs] == [5, 5, 2]


# --- training loop


def _corpus(n=200, seed=0):
    rng = np.random.default_rng(seed)
    sents = [random_sentence(rng, 6, 14) for _ in range(n)]
    vocab = build_vocab(sents, max_size=200)
    return P.chunk_documents(sents, 5), vocab


def _tiny(vocab, **kw):
    return E.preset("bert_base", "tiny", vocab_size=len(vocab), max_len=32, hidden_size=32, feedforward_size=64, **kw)


def test_pretrain_reduces_mlm_loss():
    docs, vocab = _corpus()
    model = E.init_model(_tiny(vocab), seed=0)
    cfg = P.PretrainConfig(max_steps=200, batch_size=16, max_len=32, seed=0, learning_rate=1e-3)
    res = P.pretrain(model, docs, vocab, cfg)
    assert len(res.trace) == 200
    first = np.mean([r["mlm_loss"] for r in res.trace[:10]])
    last = np.mean([r["mlm_loss"] for r in res.trace[-10:]])
    assert last < first
    assert all(math.isfinite(r["loss"]) for r in res.trace)
    assert res.model.mlm and res.model.nsp


def test_pretrain_without_nsp_has_no_nsp_term():
    docs, vocab = _corpus(60)
    model = E.init_model(_tiny(vocab), seed=0)
    cfg = P.PretrainConfig(max_steps=5, nsp_enabled=False, dynamic_masking=True, max_len=32)
    res = P.pretrain(model, docs, vocab, cfg)
    assert all(r["nsp_loss"] == 0.0 for r in res.trace)
    assert not res.model.nsp


def test_pretrain_is_deterministic():
    docs, vocab = _corpus(60)
    cfg = P.PretrainConfig(max_steps=6, max_len=32, seed=2)
    runs = [P.pretrain(E.init_model(_tiny(vocab), 0), docs, vocab, cfg) for _ in range(2)]
    assert [r["loss"] for r in runs[0].trace] == [r["loss"] for r in runs[1].trace]


def test_pretrain_vocab_mismatch():
    docs, vocab = _corpus(20)
    model = E.init_model(E.preset("bert_base", "tiny", vocab_size=len(vocab) + 1), 0)
    with pytest.raises(P.VocabMismatchError):
        P.pretrain(model, docs, vocab, P.PretrainConfig(max_steps=1))


def test_non_finite_loss_aborts():
    docs, vocab = _corpus(20)
    model = E.init_model(_tiny(vocab), 0)
    model["embeddings.ln.gain"].data[:] = np.nan
    with pytest.raises(FloatingPointError, match="epoch 0, step 0"):
        P.pretrain(model, docs, vocab, P.PretrainConfig(max_steps=2, max_len=32))


# --- distillation


def test_distillation_identity_and_reduction():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(4, 7))
    y = rng.integers(0, 7, size=4)
    loss, kl, ce, _ = P.distillation_loss(z, z.copy(), y, temperature=2.0, alpha=0.5)
    assert abs(kl) < 1e-12 and loss == pytest.approx(0.5 * ce)
    # alpha=1, T=1: KL(p||q) = CE(p, q) - H(p), so gradients match soft-target cross-entropy
    teacher = rng.normal(size=(4, 7))
    loss, kl, _, g = P.distillation_loss(z, teacher, y, temperature=1.0, alpha=1.0)
    p = T.softmax(teacher)
    soft_ce = -np.mean(np.sum(p * T.log_softmax(z), axis=1))
    entropy = -np.mean(np.sum(p * np.log(p), axis=1))
    assert loss == pytest.approx(soft_ce - entropy, rel=1e-10)
    np.testing.assert_allclose(g, (T.softmax(z) - p) / 4, atol=1e-12)


def test_distillation_gradient_finite_differences():
    rng = np.random.default_rng(1)
    s, t = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    y = rng.integers(0, 5, size=3)
    _, _, _, g = P.distillation_loss(s, t, y, 2.0, 0.3)
    num = T.numerical_gradient(lambda: P.distillation_loss(s, t, y, 2.0, 0.3)[0], s)
    assert T.relative_error(g, num) < 1e-5


def test_student_config_halves_depth():
    s = P.student_config(E.preset("bert_base"))
    assert s.num_layers == 6 and s.hidden_size == 768
    assert P.student_config(E.preset("distilbert_base", "tiny")).num_layers == 1


def test_distill_argument_errors():
    docs, vocab = _corpus(20)
    teacher = E.init_model(_tiny(vocab), 0).add_heads(mlm=True)
    cfg = P.PretrainConfig(max_steps=1, max_len=32)
    with pytest.raises(ValueError):
        P.distill(teacher, docs, vocab, cfg, temperature=0)
    with pytest.raises(ValueError):
        P.distill(teacher, docs, vocab, cfg, alpha=1.5)
    other = build_vocab([["q"]], max_size=10)
    with pytest.raises(P.VocabMismatchError):
        P.distill(teacher, docs, other, cfg)
