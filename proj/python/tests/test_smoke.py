import math
import random

import pytest

import unifier


def small_task():
    return unifier.generate_synth(num_docs=120, train_queries=16, dev_queries=6, topics=6, entities=30)


def test_quantize_is_floor():
    rng = random.Random(3)
    for _ in range(2000):
        w = 5.0 * rng.random() + 1e-9
        assert unifier.quantize_weight(w) == math.floor(100 * w) or abs(100 * w - round(100 * w)) < 1e-6
    assert unifier.quantize({7: 0.123, 3: 0.009}) == {7: 12}
    assert all(unifier.quantize_weight(k / 100) == k for k in range(1, 2001))


def test_synth_shapes():
    t = small_task()
    assert len(t["corpus"]) == 120
    assert len(t["dev_queries"]) == 6
    for qid, _ in t["dev_queries"]:
        assert any(g > 0 for g in t["dev_qrels"][qid].values())


def test_model_encoding_and_checkpoint(tmp_path):
    m = unifier.Model(vocab_size=64, embed_dim=16, seed=5, gate=True)
    dense, lex = m.encode([4, 5, 6])
    assert len(dense) == 16
    assert all(w > 0 for w in lex.values())
    assert m.encode([4, 5, 6]) == (dense, lex)
    assert 0.0 < m.gate([4, 5]) < 1.0
    m.save(tmp_path / "m.ckpt")
    back = unifier.Model.load(tmp_path / "m.ckpt")
    assert back.fingerprint() == m.fingerprint()
    assert back.encode([4, 5, 6]) == (dense, lex)
    with pytest.raises(ValueError):
        m.encode([1000])


def test_lexicon_search_matches_brute_force(tmp_path):
    t = small_task()
    m = unifier.Model(vocab_size=t["vocab_size"], embed_dim=16, seed=9)
    engine = unifier.Engine.build(m, t["corpus"])
    assert engine.num_docs == 120
    docs = {doc_id: unifier.quantize(m.encode(tokens)[1]) for doc_id, tokens in t["corpus"]}
    for qid, tokens in t["dev_queries"]:
        q = unifier.quantize(m.encode(tokens)[1])
        scores = []
        for doc_id, d in docs.items():
            s = sum(w * d.get(term, 0) for term, w in q.items())
            if s > 0:
                scores.append((-s, doc_id))
        scores.sort()
        want = [(doc_id, float(-s)) for s, doc_id in scores[:20]]
        assert engine.search(tokens, scheme="lexicon", k=20) == want
        # uni with no candidates is lexicon retrieval.
        assert engine.search(tokens, scheme="uni", k=20, k_uni=0) == want
    engine.save(tmp_path / "idx")
    m.save(tmp_path / "m.ckpt")
    again = unifier.Engine.load(tmp_path / "idx", tmp_path / "m.ckpt")
    tokens = t["dev_queries"][0][1]
    assert again.search(tokens) == engine.search(tokens)
    other = unifier.Model(vocab_size=t["vocab_size"], embed_dim=16, seed=10)
    other.save(tmp_path / "other.ckpt")
    with pytest.raises(ValueError):
        unifier.Engine.load(tmp_path / "idx", tmp_path / "other.ckpt")


def test_evaluate_contrast_case():
    run = {"q": [("a", 6.0), ("x", 5.0), ("b", 4.0), ("c", 3.0), ("d", 2.0), ("y", 1.0)]}
    qrels = {"q": {"x": 1, "y": 1}}
    m = unifier.evaluate(run, qrels)
    assert m["MRR@10"] == 0.5
    assert m["R@100"] == 1.0
    assert m["R_dpr@100"] == 1.0


def test_tiny_pipeline(tmp_path):
    t = small_task()
    config = {
        "encoder": {"vocab_size": t["vocab_size"], "embed_dim": 16},
        "mine_depth": 8,
        "warmup": {"batch_queries": 4, "negatives": 3, "lr": 0.003, "steps": 4},
        "continual": {"batch_queries": 4, "negatives": 3, "lr": 0.001, "steps": 2},
    }
    warm, final = unifier.train_pipeline(config, t["corpus"], t["train_queries"], t["train_qrels"], tmp_path / "run")
    assert warm.fingerprint() != final.fingerprint()
    assert (tmp_path / "run" / "continual.ckpt").exists()
    engine = unifier.Engine.build(final, t["corpus"], top_n=20)
    run = engine.run(t["dev_queries"], scheme="uni", k=100)
    metrics = unifier.evaluate(run, t["dev_qrels"])
    assert 0.0 <= metrics["MRR@10"] <= 1.0
