import math

import numpy as np
import pytest

from c2falign import tensor as T
from c2falign.errors import ContractError, DomainError
from c2falign.losses import (
    ContrastiveBatchView,
    build_multi_positive_targets,
    momentum_pseudo_targets,
    sic_loss,
    sic_mod_loss,
    sic_probabilities,
    sim_loss,
    total_loss,
)
from c2falign.tensor import Tensor


def unit(x):
    x = np.asarray(x, dtype=float)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def np_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def oracle_sic(speech, cands, cand_ids, batch_imgs, batch_ids, tau):
    """Scripted reference using plain numpy and explicit loops for the targets."""
    p = np_softmax(speech @ cands.T / tau)
    q = np_softmax(batch_imgs @ speech.T / tau)
    y_s2i = np.zeros_like(p)
    for r, a in enumerate(batch_ids):
        hits = [c for c, cid in enumerate(cand_ids) if cid == a]
        for c in hits:
            y_s2i[r, c] = 1 / len(hits)
    y_i2s = np.zeros_like(q)
    for r, a in enumerate(batch_ids):
        hits = [c for c, cid in enumerate(batch_ids) if cid == a]
        for c in hits:
            y_i2s[r, c] = 1 / len(hits)
    ce = lambda y, pr: -np.mean(np.sum(y * np.log(pr), axis=1))  # noqa: E731
    return p, q, 0.5 * (ce(y_s2i, p) + ce(y_i2s, q))


# B=2 speeches, C=3 candidates (one queue entry + the two batch images)
SPEECH = unit([[1.0, 0.2, 0.0], [0.1, 1.0, 0.3]])
BATCH_IMG = unit([[0.9, 0.1, 0.1], [0.0, 0.8, 0.5]])
QUEUE_IMG = unit([[0.5, 0.5, 0.5]])
CANDS = np.concatenate([QUEUE_IMG, BATCH_IMG])
CAND_IDS = np.array([7, 1, 2])
BATCH_IDS = np.array([1, 2])
TAU = 0.5


def fixture_view(speech=SPEECH, requires_grad=False):
    return ContrastiveBatchView(Tensor(speech, requires_grad=requires_grad), Tensor(CANDS), CAND_IDS,
                                Tensor(BATCH_IMG), BATCH_IDS, Tensor(TAU))


class TestSicProbabilities:
    def test_matches_oracle(self):
        p, q = sic_probabilities(fixture_view())
        op, oq, _ = oracle_sic(SPEECH, CANDS, CAND_IDS, BATCH_IMG, BATCH_IDS, TAU)
        np.testing.assert_allclose(p.data, op, atol=1e-12)
        np.testing.assert_allclose(q.data, oq, atol=1e-12)
        assert p.shape == (2, 3) and q.shape == (2, 2)

    def test_rows_sum_to_one_random(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            B, C, d = rng.integers(1, 6), rng.integers(1, 9), rng.integers(2, 6)
            view = ContrastiveBatchView(Tensor(unit(rng.standard_normal((B, d)))),
                                        Tensor(unit(rng.standard_normal((C, d)))), np.arange(C),
                                        Tensor(unit(rng.standard_normal((B, d)))), np.arange(B),
                                        Tensor(rng.uniform(1e-4, 1)))
            p, q = sic_probabilities(view)
            np.testing.assert_allclose(p.data.sum(axis=1), 1.0, atol=1e-6)
            np.testing.assert_allclose(q.data.sum(axis=1), 1.0, atol=1e-6)
            assert np.isfinite(p.data).all() and np.isfinite(q.data).all()

    def test_empty_candidates(self):
        view = ContrastiveBatchView(Tensor(SPEECH), Tensor(np.zeros((0, 3))), np.zeros(0), Tensor(BATCH_IMG),
                                    BATCH_IDS, Tensor(TAU))
        with pytest.raises(ContractError):
            sic_probabilities(view)


class TestTargets:
    def test_five_captions_share_mass(self):
        y = build_multi_positive_targets([4], [4, 4, 4, 4, 4])
        np.testing.assert_allclose(y, [[0.2] * 5])

    def test_single_positive_is_one_hot(self):
        np.testing.assert_array_equal(build_multi_positive_targets([2], [1, 2, 3]), [[0, 1, 0]])

    def test_duplicates_in_queue(self):
        y = build_multi_positive_targets([5, 6], [5, 9, 5, 6, 5])
        np.testing.assert_allclose(y, [[1 / 3, 0, 1 / 3, 0, 1 / 3], [0, 0, 0, 1, 0]], atol=1e-15)
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-9)

    def test_missing_positive(self):
        with pytest.raises(ContractError):
            build_multi_positive_targets([3], [1, 2])


class TestSicLoss:
    def test_matches_oracle(self):
        p, q = sic_probabilities(fixture_view())
        loss = sic_loss(p, q, build_multi_positive_targets(BATCH_IDS, CAND_IDS),
                        build_multi_positive_targets(BATCH_IDS, BATCH_IDS))
        assert loss.item() == pytest.approx(oracle_sic(SPEECH, CANDS, CAND_IDS, BATCH_IMG, BATCH_IDS, TAU)[2],
                                            abs=1e-12)

    def test_perfect_prediction(self):
        y = np.eye(3)
        assert sic_loss(Tensor(y), Tensor(y), y, y).item() == pytest.approx(0.0, abs=1e-12)

    def test_identical_directions(self):
        p = Tensor(np_softmax(np.random.default_rng(1).standard_normal((3, 3))))
        y = np.eye(3)
        assert sic_loss(p, p, y, y).item() == pytest.approx(T.cross_entropy(y, p).item(), abs=1e-15)

    def test_gradient(self):
        view = fixture_view(requires_grad=True)
        y1 = build_multi_positive_targets(BATCH_IDS, CAND_IDS)
        y2 = build_multi_positive_targets(BATCH_IDS, BATCH_IDS)

        def f(s):
            view.speech_cls = s
            return sic_loss(*sic_probabilities(view), y1, y2)

        assert T.finite_diff_check(f, view.speech_cls) < 1e-6


class TestMomentumDistillation:
    def test_teacher_equals_student(self):
        p, q = sic_probabilities(fixture_view())
        pseudo = momentum_pseudo_targets(Tensor(SPEECH), CANDS, TAU)
        np.testing.assert_allclose(pseudo.data, p.data, atol=1e-12)
        l_sic = sic_loss(p, q, build_multi_positive_targets(BATCH_IDS, CAND_IDS),
                         build_multi_positive_targets(BATCH_IDS, BATCH_IDS))
        mod = sic_mod_loss(l_sic, pseudo, p, 0.4)
        assert abs(mod.item() - 0.6 * l_sic.item()) <= 1e-12

    def test_alpha_zero(self):
        p, _ = sic_probabilities(fixture_view())
        q = momentum_pseudo_targets(Tensor(unit(SPEECH + 0.3)), CANDS, TAU)
        l_sic = Tensor(1.2345)
        assert sic_mod_loss(l_sic, q, p, 0.0).item() == 1.2345

    def test_offset_teacher_matches_oracle(self):
        teacher = unit(SPEECH + np.array([0.2, -0.1, 0.4]))
        p, q = sic_probabilities(fixture_view())
        pseudo = momentum_pseudo_targets(Tensor(teacher), CANDS, TAU)
        op, _, ol = oracle_sic(SPEECH, CANDS, CAND_IDS, BATCH_IMG, BATCH_IDS, TAU)
        oq = np_softmax(teacher @ CANDS.T / TAU)
        np.testing.assert_allclose(pseudo.data, oq, atol=1e-12)
        kl = np.mean(np.sum(oq * (np.log(oq) - np.log(op)), axis=1))
        l_sic = sic_loss(p, q, build_multi_positive_targets(BATCH_IDS, CAND_IDS),
                         build_multi_positive_targets(BATCH_IDS, BATCH_IDS))
        assert sic_mod_loss(l_sic, pseudo, p, 0.4).item() == pytest.approx(0.6 * ol + 0.4 * kl, abs=1e-12)

    def test_pseudo_targets_carry_no_gradient(self):
        pseudo = momentum_pseudo_targets(Tensor(SPEECH), CANDS, Tensor(TAU, requires_grad=True))
        assert not pseudo.requires_grad

    def test_pseudo_input_path_does_not_change_gradients(self):
        grads = []
        for shift in (0.0, 0.5):
            view = fixture_view(requires_grad=True)
            p, q = sic_probabilities(view)
            l_sic = sic_loss(p, q, build_multi_positive_targets(BATCH_IDS, CAND_IDS),
                             build_multi_positive_targets(BATCH_IDS, BATCH_IDS))
            pseudo = momentum_pseudo_targets(Tensor(unit(SPEECH + 0.2)), CANDS + shift * 0, TAU)
            T.backward(sic_mod_loss(l_sic, pseudo, p, 0.4))
            grads.append(view.speech_cls.grad.copy())
        np.testing.assert_array_equal(grads[0], grads[1])

    def test_rejects_student_path(self):
        with pytest.raises(ContractError):
            momentum_pseudo_targets(Tensor(SPEECH, requires_grad=True), CANDS, TAU)

    @pytest.mark.parametrize("alpha", [-0.1, 1.1])
    def test_alpha_domain(self, alpha):
        p = Tensor(np.full((1, 2), 0.5))
        with pytest.raises(DomainError):
            sic_mod_loss(Tensor(1.0), p, p, alpha)

    def test_candidate_set_mismatch(self):
        with pytest.raises(ContractError):
            sic_mod_loss(Tensor(1.0), Tensor(np.full((1, 3), 1 / 3)), Tensor(np.full((1, 2), 0.5)), 0.4)


class TestSimLoss:
    def test_uniform_outputs(self):
        assert sim_loss(Tensor(np.full((4, 2), 0.5)), [1, 0, 1, 0]).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_correct_one_hot(self):
        assert sim_loss(Tensor(np.array([[0.0, 1.0], [1.0, 0.0]])), [1, 0]).item() == pytest.approx(0.0, abs=1e-11)

    def test_mixed_batch_oracle(self):
        probs = np.array([[0.2, 0.8], [0.7, 0.3], [0.4, 0.6]])
        labels = [1, 0, 0]
        expect = -(math.log(0.8) + math.log(0.7) + math.log(0.4)) / 3
        assert sim_loss(Tensor(probs), labels).item() == pytest.approx(expect, abs=1e-12)

    def test_empty(self):
        with pytest.raises(ContractError):
            sim_loss(Tensor(np.zeros((0, 2))), [])


class TestTotalLoss:
    def test_zero(self):
        assert total_loss(0.0, 0.0) == 0.0

    def test_additivity(self):
        assert total_loss(0.6, math.log(2)) == pytest.approx(0.6 + math.log(2), abs=1e-15)

    def test_tensor_sum_and_gradient(self):
        a = Tensor(0.6, requires_grad=True)
        b = Tensor(0.25, requires_grad=True)
        out = total_loss(a, b)
        T.backward(out)
        assert out.item() == pytest.approx(0.85, abs=1e-15)
        assert a.grad == 1.0 and b.grad == 1.0
