import numpy as np
import pytest
import torch

from crossview.errors import ContractError, RangeError
from crossview.models import (
    GRADCHECK_DECODER,
    GRADCHECK_GROUND,
    GRADCHECK_SATELLITE,
    build_model,
)
from crossview.retrieval import (
    EmbeddingIndex,
    RetrievalResult,
    build_index,
    hierarchical_retrieve,
    load_index,
    recall_at_k,
    save_index,
    unimodal_retrieve,
)
from crossview.rng import stream


def unit_matrix(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def random_index(rng, n, d=8, modality="ground", with_ties=False):
    matrix = unit_matrix(rng, n, d)
    if with_ties and n >= 4:
        # duplicated rows force exact score ties, resolved by ascending id
        matrix[1] = matrix[0]
        matrix[n // 2] = matrix[n // 2 - 1]
    ids = [f"obs-{i}" for i in range(n)]  # unpadded: lexicographic != numeric
    species = [int(rng.integers(0, 5)) for _ in range(n)]
    return EmbeddingIndex(matrix=matrix, ids=ids, species=species, modality=modality)


def oracle_topk(matrix, ids, query, k):
    scores = matrix @ query
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))[:k]
    return [ids[i] for i in order], [float(scores[i]) for i in order]


def test_index_validation():
    rng = stream(0, "synth")
    good = unit_matrix(rng, 4, 6)
    with pytest.raises(ContractError, match="unit"):
        EmbeddingIndex(matrix=good * 2.0, ids=list("abcd"), species=[0] * 4, modality="ground")
    with pytest.raises(ContractError, match="distinct"):
        EmbeddingIndex(matrix=good, ids=list("aacd"), species=[0] * 4, modality="ground")
    with pytest.raises(ContractError, match="misaligned"):
        EmbeddingIndex(matrix=good, ids=list("abc"), species=[0] * 4, modality="ground")
    with pytest.raises(ContractError, match="modality"):
        EmbeddingIndex(matrix=good, ids=list("abcd"), species=[0] * 4, modality="aerial")


def test_result_validation():
    with pytest.raises(ContractError, match="descending"):
        RetrievalResult(query_id="q", ids=["a", "b"], scores=[0.1, 0.5])
    with pytest.raises(ContractError, match="distinct"):
        RetrievalResult(query_id="q", ids=["a", "a"], scores=[0.5, 0.1])
    with pytest.raises(ContractError, match="misaligned"):
        RetrievalResult(query_id="q", ids=["a"], scores=[0.5, 0.1])


def test_retrieve_matches_full_sort_oracle():
    rng = stream(1, "synth")
    for trial in range(40):
        n = int(rng.integers(2, 120))
        index = random_index(rng, n, with_ties=(trial % 2 == 0))
        query = unit_matrix(rng, 1, 8)[0]
        k = int(rng.integers(1, n + 1))
        result = unimodal_retrieve(query, index, k)
        want_ids, want_scores = oracle_topk(index.matrix, index.ids, query, k)
        assert result.ids == want_ids
        assert result.scores == want_scores


def test_self_retrieval_rank_one():
    rng = stream(2, "synth")
    index = random_index(rng, 30)
    for i in (0, 7, 29):
        result = unimodal_retrieve(index.matrix[i], index, k=3)
        assert result.ids[0] == index.ids[i]
        assert abs(result.scores[0] - 1.0) < 1e-12


def test_retrieve_k_equals_n_is_permutation():
    rng = stream(3, "synth")
    index = random_index(rng, 17)
    result = unimodal_retrieve(unit_matrix(rng, 1, 8)[0], index, k=17)
    assert sorted(result.ids) == sorted(index.ids)
    assert all(a >= b for a, b in zip(result.scores, result.scores[1:]))


def test_retrieve_k_bounds():
    rng = stream(4, "synth")
    index = random_index(rng, 5)
    query = unit_matrix(rng, 1, 8)[0]
    with pytest.raises(RangeError):
        unimodal_retrieve(query, index, k=6)
    with pytest.raises(RangeError):
        unimodal_retrieve(query, index, k=0)


def test_retrieve_rotation_invariant():
    rng = stream(5, "synth")
    index = random_index(rng, 25)
    query = unit_matrix(rng, 1, 8)[0]
    q_mat, _ = np.linalg.qr(rng.standard_normal((8, 8)))
    rotated = EmbeddingIndex(
        matrix=index.matrix @ q_mat, ids=index.ids, species=index.species, modality="ground"
    )
    a = unimodal_retrieve(query, index, k=10)
    b = unimodal_retrieve(query @ q_mat, rotated, k=10)
    assert a.ids == b.ids
    np.testing.assert_allclose(a.scores, b.scores, atol=1e-9)


def test_recall_at_k_basic_and_monotone():
    corpus_species = {"a": 0, "b": 1, "c": 0}
    result = RetrievalResult(query_id="q", ids=["b", "a", "c"], scores=[0.9, 0.5, 0.1])
    assert recall_at_k([result], [0], corpus_species, k=1) == 0.0
    assert recall_at_k([result], [0], corpus_species, k=2) == 1.0
    assert recall_at_k([result], [7], corpus_species, k=3) == 0.0  # species absent

    rng = stream(6, "synth")
    for _ in range(20):
        n = int(rng.integers(3, 30))
        index = random_index(rng, n)
        species_of = dict(zip(index.ids, index.species))
        queries = [unit_matrix(rng, 1, 8)[0] for _ in range(5)]
        q_species = [int(rng.integers(0, 5)) for _ in range(5)]
        results = [unimodal_retrieve(q, index, k=n) for q in queries]
        recalls = [recall_at_k(results, q_species, species_of, k) for k in range(1, n + 1)]
        assert all(a <= b for a, b in zip(recalls, recalls[1:]))


def test_recall_contracts():
    result = RetrievalResult(query_id="q", ids=["a"], scores=[0.5])
    with pytest.raises(ContractError):
        recall_at_k([result], [0, 1], {"a": 0}, k=1)
    with pytest.raises(ContractError):
        recall_at_k([], [], {"a": 0}, k=1)
    with pytest.raises(RangeError):
        recall_at_k([result], [0], {"a": 0}, k=2)


def test_index_save_load_roundtrip(tmp_path):
    rng = stream(7, "synth")
    index = random_index(rng, 12, modality="satellite")
    index.checkpoint_hash = "cafe" * 16
    path = str(tmp_path / "corpus.idx")
    save_index(index, path)
    loaded = load_index(path)
    assert loaded.ids == index.ids
    assert loaded.species == index.species
    assert loaded.modality == "satellite"
    assert loaded.checkpoint_hash == index.checkpoint_hash
    # storage is float32; the loaded matrix is exactly the rounded original
    np.testing.assert_array_equal(
        loaded.matrix, index.matrix.astype("<f4").astype(np.float64)
    )
    save_index(index, str(tmp_path / "again.idx"))
    assert open(path, "rb").read() == open(tmp_path / "again.idx", "rb").read()


def test_index_bad_magic(tmp_path):
    path = tmp_path / "junk.idx"
    path.write_bytes(b"WRONG!!!" + b"\x00" * 32)
    with pytest.raises(ContractError, match="magic"):
        load_index(str(path))


def tiny_models():
    cve = build_model("cve", GRADCHECK_GROUND, GRADCHECK_SATELLITE, GRADCHECK_DECODER, seed=1)
    cvm = build_model("cvm", GRADCHECK_GROUND, GRADCHECK_SATELLITE, GRADCHECK_DECODER, seed=2)
    return cve, cvm


def ground_corpus(rng, n):
    return rng.random((n, GRADCHECK_GROUND.image_size, GRADCHECK_GROUND.image_size, 3))


def test_build_index_contracts_and_determinism():
    rng = stream(8, "synth")
    cve, cvm = tiny_models()
    images = ground_corpus(rng, 6)
    ids = [f"g{i}" for i in range(6)]
    species = [i % 2 for i in range(6)]
    index = build_index(images, ids, species, cve, "ground")
    assert len(index) == 6
    np.testing.assert_allclose(np.linalg.norm(index.matrix, axis=1), 1.0, atol=1e-9)
    again = build_index(images, ids, species, cve, "ground")
    np.testing.assert_array_equal(index.matrix, again.matrix)
    # identical images embed identically
    dup = np.concatenate([images[:1], images[:1]])
    didx = build_index(dup, ["a", "b"], [0, 0], cve, "ground")
    np.testing.assert_array_equal(didx.matrix[0], didx.matrix[1])
    with pytest.raises(ContractError, match="dual-stream"):
        build_index(images, ids, species, cvm, "ground")
    with pytest.raises(ContractError, match="modality"):
        build_index(images, ids, species, cve, "aerial")


def test_hierarchical_subset_of_stage1():
    rng = stream(9, "synth")
    cve, cvm = tiny_models()
    images = ground_corpus(rng, 12)
    ids = [f"g{i}" for i in range(12)]
    index = build_index(images, ids, [i % 3 for i in range(12)], cve, "ground")
    query_sat = rng.random((GRADCHECK_SATELLITE.image_size, GRADCHECK_SATELLITE.image_size, 3))

    with torch.no_grad():
        q_emb = cve.embed_satellite(query_sat[None])[0]
    stage1 = unimodal_retrieve(q_emb, index, k=8)
    result = hierarchical_retrieve(query_sat, images, index, cve, cvm, m=8, k=5)
    assert set(result.ids) <= set(stage1.ids)
    assert all(a >= b for a, b in zip(result.scores, result.scores[1:]))
    assert all(0.0 < s < 1.0 for s in result.scores)  # matching probabilities


def test_hierarchical_m_equals_k_is_set_equal():
    rng = stream(10, "synth")
    cve, cvm = tiny_models()
    images = ground_corpus(rng, 10)
    index = build_index(images, [f"g{i}" for i in range(10)], [0] * 10, cve, "ground")
    query_sat = rng.random((16, 16, 3))
    with torch.no_grad():
        q_emb = cve.embed_satellite(query_sat[None])[0]
    stage1 = unimodal_retrieve(q_emb, index, k=6)
    result = hierarchical_retrieve(query_sat, images, index, cve, cvm, m=6, k=6)
    assert set(result.ids) == set(stage1.ids)


def test_hierarchical_full_rerank_oracle():
    rng = stream(11, "synth")
    cve, cvm = tiny_models()
    n = 9
    images = ground_corpus(rng, n)
    ids = [f"g{i}" for i in range(n)]
    index = build_index(images, ids, [0] * n, cve, "ground")
    query_sat = rng.random((16, 16, 3))

    result = hierarchical_retrieve(query_sat, images, index, cve, cvm, m=n, k=n)

    with torch.no_grad():
        q_emb = cve.embed_satellite(query_sat[None])[0]
        sats = np.broadcast_to(query_sat, (n,) + query_sat.shape).copy()
        probs = cvm.match_probability(cvm.embed_pair(images, sats)).numpy()
    stage1_scores = index.matrix @ q_emb.numpy()
    order = sorted(range(n), key=lambda i: (-probs[i], -stage1_scores[i], ids[i]))
    assert result.ids == [ids[i] for i in order]
    np.testing.assert_allclose(result.scores, [float(probs[i]) for i in order], atol=1e-12)


def test_hierarchical_contracts():
    rng = stream(12, "synth")
    cve, cvm = tiny_models()
    images = ground_corpus(rng, 5)
    index = build_index(images, [f"g{i}" for i in range(5)], [0] * 5, cve, "ground")
    query_sat = rng.random((16, 16, 3))
    with pytest.raises(RangeError, match="exceeds candidate"):
        hierarchical_retrieve(query_sat, images, index, cve, cvm, m=3, k=4)
    sat_index = EmbeddingIndex(
        matrix=index.matrix, ids=index.ids, species=index.species, modality="satellite"
    )
    with pytest.raises(ContractError, match="ground index"):
        hierarchical_retrieve(query_sat, images, sat_index, cve, cvm, m=3, k=2)
    with pytest.raises(ContractError, match="misaligned"):
        hierarchical_retrieve(query_sat, images[:4], index, cve, cvm, m=3, k=2)
