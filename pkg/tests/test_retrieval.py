import itertools
import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from c2falign.datasynth import SynthConfig, generate_dataset, train_test_split
from c2falign.encoders import ModelState
from c2falign.errors import ContractError, ShapeError
from c2falign.retrieval import (
    EmbeddingBank,
    evaluate,
    image_bank,
    pairwise_similarity,
    recall_at_k,
    rerank_top_k,
    speech_bank,
    two_stage_retrieve,
)
from c2falign.trainer import model_config_for


def unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def brute_force_ranking(sic, sim, ids, k):
    """Enumerate every ordering and keep the one the two-stage rule prefers.

    The rule as a sort key: position in the SIC top-k block first, then (inside
    the block) higher SIM, then lower id; outside the block higher SIC, lower id.
    """
    n = len(ids)
    sic_key = sorted(range(n), key=lambda i: (-sic[i], ids[i]))
    block = set(sic_key[:k])

    def key(order):
        return [(0, -sim[i], ids[i]) if i in block else (1, -sic[i], ids[i]) for i in order]

    return list(min(itertools.permutations(range(n)), key=key))


class TestPairwiseSimilarity:
    def test_self_similarity(self):
        bank = unit(np.random.default_rng(0).standard_normal((6, 4)))
        np.testing.assert_allclose(np.diag(pairwise_similarity(bank, bank)), 1.0, atol=1e-9)

    def test_orthonormal(self):
        np.testing.assert_allclose(pairwise_similarity(np.eye(3)[:2], np.eye(3)[2:]), 0.0)

    def test_scripted_oracle(self):
        rng = np.random.default_rng(1)
        a, b = unit(rng.standard_normal((5, 3))), unit(rng.standard_normal((5, 3)))
        expect = [[sum(a[i, t] * b[j, t] for t in range(3)) for j in range(5)] for i in range(5)]
        np.testing.assert_allclose(pairwise_similarity(a, b), expect, atol=1e-12)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            pairwise_similarity(np.ones((2, 3)), np.ones((2, 4)))


class TestRerank:
    def test_inversion_fixture_matches_brute_force(self):
        ids = np.array([10, 11, 12, 13])
        sic = np.array([0.9, 0.8, 0.3, 0.1])
        sim = np.array([0.2, 0.7, 0.9, 0.1])
        order = rerank_top_k(sic, ids, 2, lambda pos: sim[pos])
        assert order.tolist() == [1, 0, 2, 3]
        assert order.tolist() == brute_force_ranking(sic, sim, ids, 2)

    def test_k_one_keeps_sic_top(self):
        sic = np.array([0.1, 0.9, 0.5])
        order = rerank_top_k(sic, np.arange(3), 1, lambda pos: np.full(len(pos), 1.0))
        assert order[0] == 1

    def test_ties_go_to_lower_id(self):
        order = rerank_top_k(np.array([0.5, 0.5, 0.5]), np.array([7, 3, 5]), 3, lambda pos: np.zeros(len(pos)))
        assert order.tolist() == [1, 2, 0]

    def test_k_clipped_with_warning(self):
        with pytest.warns(UserWarning):
            order = rerank_top_k(np.array([0.2, 0.4]), np.arange(2), 5, lambda pos: -np.arange(len(pos)))
        assert sorted(order.tolist()) == [0, 1]

    def test_k_must_be_positive(self):
        with pytest.raises(ContractError):
            rerank_top_k(np.array([0.2, 0.4]), np.arange(2), 0, lambda pos: np.zeros(len(pos)))

    def test_adversarial_sim_inverts_block(self):
        sic = np.linspace(1, 0, 8)
        order = rerank_top_k(sic, np.arange(8), 4, lambda pos: np.asarray(pos, dtype=float))
        assert order.tolist() == [3, 2, 1, 0, 4, 5, 6, 7]

    @settings(max_examples=60, deadline=None)
    @given(n=st.integers(1, 7), k=st.integers(1, 7), seed=st.integers(0, 10_000))
    def test_containment_and_brute_force(self, n, k, seed):
        rng = np.random.default_rng(seed)
        ids = rng.permutation(20)[:n]
        sic = rng.integers(0, 3, size=n) / 2.0  # coarse values force ties
        sim = rng.integers(0, 3, size=n) / 2.0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            order = rerank_top_k(sic, ids, k, lambda pos: sim[pos])
        kk = min(k, n)
        sic_top = set(np.lexsort((ids, -sic))[:kk].tolist())
        assert set(order[:kk].tolist()) == sic_top
        assert sorted(order.tolist()) == list(range(n))
        if n <= 6:
            assert order.tolist() == brute_force_ranking(sic, sim, ids, kk)


class TestRecall:
    def test_identity_similarity(self):
        rankings = [np.argsort(-row) for row in np.eye(5)]
        assert recall_at_k(rankings, [{i} for i in range(5)], 1) == 1.0

    def test_k_covers_everything(self):
        rng = np.random.default_rng(2)
        rankings = [rng.permutation(4) for _ in range(6)]
        assert recall_at_k(rankings, [{int(rng.integers(4))} for _ in range(6)], 4) == 1.0

    def test_four_by_four_enumeration(self):
        sims = np.array([[0.9, 0.1, 0.3, 0.2],
                         [0.8, 0.7, 0.1, 0.0],
                         [0.1, 0.2, 0.3, 0.4],
                         [0.5, 0.6, 0.4, 0.7]])
        rankings = [np.argsort(-row, kind="stable") for row in sims]
        truth = [{0}, {1}, {2}, {3}]
        # ranks of the true item: 1, 2, 2, 1
        assert recall_at_k(rankings, truth, 1) == 0.5
        assert recall_at_k(rankings, truth, 2) == 1.0

    def test_multiple_ground_truth(self):
        assert recall_at_k([np.array([3, 1, 2])], [{2, 3}], 1) == 1.0
        assert recall_at_k([np.array([1, 3, 2])], [{2, 3}], 1) == 0.0


@pytest.fixture(scope="module")
def small_split():
    cfg = SynthConfig(num_classes=8, images_per_class=3)
    return train_test_split(generate_dataset(cfg), cfg)[1]


@pytest.fixture(scope="module")
def fresh_state(small_split):
    return ModelState(model_config_for(small_split), np.random.default_rng(0))


class TestEvaluate:
    def test_report_shape_and_monotone(self, small_split, fresh_state):
        rep = evaluate(fresh_state, small_split, k=4, seed=0, config_hash="abc")
        for direction in (rep.speech_to_image, rep.image_to_speech, rep.mean):
            assert direction["r1"] <= direction["r5"] <= direction["r10"]
        assert rep.mean["r1"] == pytest.approx((rep.speech_to_image["r1"] + rep.image_to_speech["r1"]) / 2)
        doc = json.loads(rep.to_json())
        assert set(doc) >= {"speech_to_image", "image_to_speech", "mean", "k", "n_queries", "config_hash", "seed"}
        assert doc["n_queries"] == {"speech_to_image": 40, "image_to_speech": 8}
        assert "Speech -> Image" in rep.table()

    def test_deterministic_report(self, small_split, fresh_state):
        a = evaluate(fresh_state, small_split, k=4).to_json()
        b = evaluate(fresh_state, small_split, k=4).to_json()
        assert a == b

    def test_does_not_mutate_state(self, small_split, fresh_state):
        before = fresh_state.param_hash()
        evaluate(fresh_state, small_split, k=4)
        assert fresh_state.param_hash() == before

    def test_untrained_near_chance(self):
        cfg = SynthConfig()
        test = train_test_split(generate_dataset(cfg), cfg)[1]
        state = ModelState(model_config_for(test), np.random.default_rng(0))
        rep = evaluate(state, test)
        assert rep.mean["r1"] <= 3.0 / test.num_images

    def test_rerank_only_permutes_top_k(self, small_split, fresh_state):
        sp, im = speech_bank(fresh_state, small_split), image_bank(fresh_state, small_split)
        for row in range(3):
            query = sp.rows(row)
            ranked = two_stage_retrieve(query, im, 4, fresh_state)
            plain = two_stage_retrieve(query, im, 4, fresh_state, rerank=False)
            assert set(ranked[:4]) == set(plain[:4])
            np.testing.assert_array_equal(ranked[4:], plain[4:])

    def test_image_query_direction(self, small_split, fresh_state):
        sp, im = speech_bank(fresh_state, small_split), image_bank(fresh_state, small_split)
        ranked = two_stage_retrieve(im.rows(0), sp, 5, fresh_state, query_is_speech=False)
        assert sorted(ranked.tolist()) == sorted(sp.ids.tolist())

    def test_single_query_only(self, small_split, fresh_state):
        im = image_bank(fresh_state, small_split)
        with pytest.raises(ContractError):
            two_stage_retrieve(im.rows([0, 1]), im, 2, fresh_state)

    def test_empty_split(self, small_split, fresh_state):
        empty = type(small_split)(small_split.image_ids[:0], small_split.image_feats[:0], small_split.speech_ids[:0],
                                  small_split.speech_image_ids[:0], small_split.speech_feats[:0], "test")
        with pytest.raises(ContractError):
            evaluate(fresh_state, empty)

    def test_bank_rows(self):
        bank = EmbeddingBank(np.array([4, 5]), np.eye(2), np.zeros((2, 1, 2)))
        assert len(bank.rows(1)) == 1 and bank.rows(1).ids.tolist() == [5]
