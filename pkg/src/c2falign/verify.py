"""Self-check suites behind ``c2falign verify``.

Each check returns a :class:`CheckResult`; none of them raise on failure, so
the caller can print every line before deciding the exit code.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.stats import chisquare

from . import tensor as T
from .encoders import ModelConfig, ModelState, encode_image, encode_speech, fuse_multimodal, sim_head
from .losses import (ContrastiveBatchView, build_multi_positive_targets, momentum_pseudo_targets,
                     sic_loss, sic_mod_loss, sic_probabilities, sim_loss, total_loss)
from .memqueue import EmbeddingQueue, sample_hard_negative, sample_hard_negatives
from .tensor import Tensor

GRAD_TOLERANCE = 1e-4
CHI2_MIN_P = 0.01
SAMPLER_PROBS = np.array([0.4, 0.2, 0.1, 0.1, 0.1, 0.05, 0.03, 0.02])
LOSS_NAMES = ("sic", "sic_mod", "sim", "total")


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


# -- gradient fidelity ---------------------------------------------------------
GRAD_MODEL = ModelConfig(feature_dim=6, speech_layers=3, speech_tokens=3, image_tokens=2, dim=8, heads=2,
                         depth=2, mlp_ratio=2)


class LossProbe:
    """All four objectives on one fixed random batch, as functions of the student params.

    Hard negatives and the teacher pseudo-targets are computed once and then
    frozen: both are constants of the objective (the sampler is not
    differentiable and the teacher path is stop-gradient), so a finite
    difference must not move them either.
    """

    def __init__(self, seed: int = 0, batch: int = 4, queue_len: int = 4, alpha: float = 0.4,
                 cfg: ModelConfig = GRAD_MODEL):
        rng = np.random.default_rng(seed)
        self.state = ModelState(cfg, rng)
        st = self.state
        for group in (st.speech, st.fusion, st.teacher):
            for v in group.values():
                v.data += 0.2 * rng.standard_normal(v.shape)
        st.sim["w"].data[...] = rng.standard_normal(st.sim["w"].shape)
        st.sim["b"].data[...] = 0.1 * rng.standard_normal(2)
        st.tau.data[...] = 0.2
        self.alpha = alpha
        self.speech = rng.standard_normal((batch, cfg.speech_layers, cfg.speech_tokens, cfg.feature_dim))
        n_img = batch + queue_len
        img = encode_image(rng.standard_normal((n_img, cfg.image_tokens, cfg.feature_dim)), st)
        ids = np.arange(n_img)
        ids[batch] = ids[0]  # a queue duplicate of a batch image exercises multi-positive targets
        self.batch_ids = ids[:batch]
        self.batch_cls, self.batch_tok = img.cls.data[:batch], img.tokens.data[:batch]
        self.cand_ids = np.concatenate([ids[batch:], self.batch_ids])
        self.cand_cls = np.concatenate([img.cls.data[batch:], self.batch_cls])
        self.cand_tok = np.concatenate([img.tokens.data[batch:], self.batch_tok])
        with T.no_grad():
            p, _ = self._probs()
            teacher = encode_speech(self.speech, self.state, use_teacher=True)
            self.pseudo = momentum_pseudo_targets(teacher.cls, self.cand_cls, self.state.tau)
        self.negatives = sample_hard_negatives(p.data, self.cand_ids, self.batch_ids, rng)

    def params(self) -> list[tuple[str, Tensor]]:
        return self.state.student_params()

    def _probs(self):
        sp = encode_speech(self.speech, self.state)
        view = ContrastiveBatchView(sp.cls, Tensor(self.cand_cls), self.cand_ids, Tensor(self.batch_cls),
                                    self.batch_ids, self.state.tau)
        self._speech = sp
        return sic_probabilities(view)

    def losses(self) -> dict[str, Tensor]:
        p, q = self._probs()
        sp = self._speech
        l_sic = sic_loss(p, q, build_multi_positive_targets(self.batch_ids, self.cand_ids),
                         build_multi_positive_targets(self.batch_ids, self.batch_ids))
        l_mod = sic_mod_loss(l_sic, self.pseudo, p, self.alpha)
        B = len(self.batch_ids)
        rows = np.flatnonzero(self.negatives >= 0)
        sel = np.concatenate([np.arange(B), rows])
        img_cls = np.concatenate([self.batch_cls, self.cand_cls[self.negatives[rows]]])
        img_tok = np.concatenate([self.batch_tok, self.cand_tok[self.negatives[rows]]])
        joint = fuse_multimodal(sp.cls[sel], sp.tokens[sel], img_cls, img_tok, self.state)
        labels = np.concatenate([np.ones(B, dtype=np.int64), np.zeros(len(rows), dtype=np.int64)])
        l_sim = sim_loss(sim_head(joint, self.state), labels)
        return {"sic": l_sic, "sic_mod": l_mod, "sim": l_sim, "total": total_loss(l_mod, l_sim)}


def gradient_errors(probe: LossProbe, h: float = 1e-5) -> dict[str, float]:
    """Max relative error per loss over every coordinate of every student parameter.

    One perturbed forward pass evaluates all four losses, so the cost is two
    forwards per coordinate. Relative error uses ``max(|a|, |n|, 1e-8)``.
    """
    params = probe.params()
    analytic = {}
    for name in LOSS_NAMES:
        probe.state.zero_grad()
        T.backward(probe.losses()[name])
        analytic[name] = [p.grad.reshape(-1).copy() for _, p in params]
    worst = dict.fromkeys(LOSS_NAMES, 0.0)
    for pos, (_, p) in enumerate(params):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with T.no_grad():
                flat[i] = orig + h
                plus = {k: v.item() for k, v in probe.losses().items()}
                flat[i] = orig - h
                minus = {k: v.item() for k, v in probe.losses().items()}
            flat[i] = orig
            for name in LOSS_NAMES:
                num = (plus[name] - minus[name]) / (2 * h)
                a = analytic[name][pos][i]
                err = abs(a - num) / max(abs(a), abs(num), 1e-8)
                worst[name] = max(worst[name], err)
    return worst


def check_gradients(seed: int = 0) -> CheckResult:
    t0 = time.perf_counter()
    probe = LossProbe(seed)
    errs = gradient_errors(probe)
    n = sum(p.data.size for _, p in probe.params())
    ok = all(e < GRAD_TOLERANCE for e in errs.values())
    detail = ", ".join(f"{k}={v:.2e}" for k, v in errs.items())
    return CheckResult("gradient fidelity", ok,
                       f"{detail} over {n} coordinates in {time.perf_counter() - t0:.1f}s")


# -- sampler --------------------------------------------------------------------
def sampler_counts(draws: int = 10_000, seed: int = 0):
    """Histogram of hard-negative draws on the fixed 8-way distribution.

    Candidate ids ``[0..7]`` plus a duplicate of the positive id 8 at the end
    (with weight) check that masked candidates never leak.
    """
    rng = np.random.default_rng(seed)
    probs = np.append(SAMPLER_PROBS, 0.3)
    ids = np.append(np.arange(8), 8)
    picks = np.array([sample_hard_negative(probs, ids, 8, rng) for _ in range(draws)])
    return np.bincount(picks, minlength=9), int(np.sum(ids[picks] == 8))


def check_sampler(draws: int = 10_000, seed: int = 0) -> CheckResult:
    counts, leaks = sampler_counts(draws, seed)
    pvalue = float(chisquare(counts[:8], draws * SAMPLER_PROBS).pvalue)
    ok = pvalue > CHI2_MIN_P and leaks == 0
    return CheckResult("hard-negative sampler", ok, f"chi-square p={pvalue:.3f}, positive leaks={leaks}")


# -- queue ------------------------------------------------------------------------
def queue_oracle_mismatches(ops: int = 10_000, capacity: int = 16, dim: int = 4, tokens: int = 2,
                            seed: int = 0) -> int:
    """Random enqueue/snapshot traffic against a plain-list FIFO; returns mismatch count."""
    rng = np.random.default_rng(seed)
    queue = EmbeddingQueue(capacity, dim, tokens)
    ref: list[tuple[int, np.ndarray, np.ndarray]] = []
    bad = 0
    for _ in range(ops):
        if rng.random() < 0.5:
            n = int(rng.integers(0, capacity + 1))
            ids = rng.integers(0, 50, size=n)
            cls = rng.standard_normal((n, dim))
            cls /= np.linalg.norm(cls, axis=1, keepdims=True)
            tok = rng.standard_normal((n, tokens, dim))
            queue.enqueue_batch(ids, cls, tok)
            ref = (ref + list(zip(ids.tolist(), cls, tok)))[-capacity:]
        else:
            snap = queue.snapshot()
            same = snap.ids.tolist() == [r[0] for r in ref] and all(
                np.array_equal(c, r[1]) and np.array_equal(t, r[2]) for c, t, r in zip(snap.cls, snap.tokens, ref))
            bad += int(not same)
    return bad


def check_queue(ops: int = 10_000) -> CheckResult:
    bad = queue_oracle_mismatches(ops)
    return CheckResult("queue oracle", bad == 0, f"{ops} operations, {bad} mismatching snapshots")


def run_all() -> list[CheckResult]:
    return [check_gradients(), check_sampler(), check_queue()]
