"""Two-stage retrieval (dense similarity, then matching-head rerank) and R@K."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .datasynth import PairedDataset
from .encoders import ModelState, encode_image, encode_speech, fuse_multimodal, sim_head
from .errors import ContractError, ShapeError

RECALL_KS = (1, 5, 10)
DEFAULT_RERANK_K = 8
_CHUNK = 512


@dataclass
class EmbeddingBank:
    ids: np.ndarray     # [n]
    cls: np.ndarray     # [n, d] unit rows
    tokens: np.ndarray  # [n, N, d]

    def __len__(self) -> int:
        return len(self.ids)

    def rows(self, idx) -> "EmbeddingBank":
        idx = np.atleast_1d(idx)
        return EmbeddingBank(self.ids[idx], self.cls[idx], self.tokens[idx])


def speech_bank(state: ModelState, ds: PairedDataset) -> EmbeddingBank:
    cls, tok = [], []
    with T.no_grad():
        for lo in range(0, ds.num_speech, _CHUNK):
            emb = encode_speech(ds.speech_feats[lo:lo + _CHUNK], state)
            cls.append(emb.cls.data)
            tok.append(emb.tokens.data)
    return EmbeddingBank(ds.speech_ids.copy(), np.concatenate(cls), np.concatenate(tok))


def image_bank(state: ModelState, ds: PairedDataset) -> EmbeddingBank:
    emb = encode_image(ds.image_feats, state)
    return EmbeddingBank(ds.image_ids.copy(), emb.cls.data, emb.tokens.data)


def pairwise_similarity(speech_cls, image_cls) -> np.ndarray:
    """Dense dot products ``[Ns, Ni]``; cosine similarity for unit rows."""
    a, b = np.asarray(speech_cls, dtype=np.float64), np.asarray(image_cls, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_similarity: banks {a.shape} and {b.shape} do not align")
    return a @ b.T


def match_scores(state: ModelState, speech: EmbeddingBank, image: EmbeddingBank) -> np.ndarray:
    """Match-class probability for each aligned (speech row, image row) pair."""
    if len(speech) != len(image):
        raise ShapeError("match_scores: pair lists differ in length")
    out = np.empty(len(speech))
    with T.no_grad():
        for lo in range(0, len(speech), _CHUNK):
            s, i = speech.rows(np.arange(lo, min(lo + _CHUNK, len(speech)))), \
                image.rows(np.arange(lo, min(lo + _CHUNK, len(image))))
            joint = fuse_multimodal(T.Tensor(s.cls), T.Tensor(s.tokens), i.cls, i.tokens, state)
            out[lo:lo + len(s)] = sim_head(joint, state).data[:, 1]
    return out


def _order(scores: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Indices sorted by descending score, ties to the lower id."""
    return np.lexsort((ids, -scores))


def _clip_k(k: int, n: int) -> int:
    if k < 1:
        raise ContractError(f"rerank depth k must be >= 1, got {k}")
    if k > n:
        warnings.warn(f"k={k} exceeds {n} candidates; clipping", stacklevel=3)
        return n
    return k


def rerank_top_k(sic_scores, candidate_ids, k: int,
                 scorer: Callable[[np.ndarray], np.ndarray] | None) -> np.ndarray:
    """Rank candidate positions: SIC order, then the top-k block reordered by ``scorer``.

    ``scorer`` maps candidate positions to SIM scores; ``None`` keeps SIC order.
    """
    sic_scores = np.asarray(sic_scores, dtype=np.float64)
    ids = np.asarray(candidate_ids)
    order = _order(sic_scores, ids)
    if scorer is None:
        return order
    k = _clip_k(k, len(order))
    head = order[:k]
    sim = np.asarray(scorer(head), dtype=np.float64)
    return np.concatenate([head[_order(sim, ids[head])], order[k:]])


def two_stage_retrieve(query: EmbeddingBank, bank: EmbeddingBank, k: int, state: ModelState,
                       query_is_speech: bool = True, rerank: bool = True) -> np.ndarray:
    """Ranked candidate ids for a single query row."""
    if len(query) != 1:
        raise ContractError("two_stage_retrieve takes exactly one query")
    sic = pairwise_similarity(query.cls, bank.cls)[0]

    def scorer(pos):
        q = query.rows(np.zeros(len(pos), dtype=np.int64))
        c = bank.rows(pos)
        return match_scores(state, q, c) if query_is_speech else match_scores(state, c, q)

    return bank.ids[rerank_top_k(sic, bank.ids, k, scorer if rerank else None)]


def recall_at_k(rankings: Sequence[np.ndarray], ground_truth: Sequence, K: int) -> float:
    """Fraction of queries with at least one ground-truth id in their top ``K``."""
    if len(rankings) == 0:
        return 0.0
    hits = sum(bool(np.isin(r[:K], np.asarray(list(gt))).any()) for r, gt in zip(rankings, ground_truth))
    return hits / len(rankings)


def _rank_all(sims: np.ndarray, cand_ids: np.ndarray, k: int, pair_scores) -> list[np.ndarray]:
    """Batch version of two-stage ranking for every query row of ``sims``."""
    orders = [_order(row, cand_ids) for row in sims]
    if pair_scores is None:
        return [cand_ids[o] for o in orders]
    k = _clip_k(k, sims.shape[1])
    q_idx = np.repeat(np.arange(len(sims)), k)
    c_idx = np.concatenate([o[:k] for o in orders])
    scores = pair_scores(q_idx, c_idx).reshape(len(sims), k)
    out = []
    for o, s in zip(orders, scores):
        head = o[:k]
        out.append(cand_ids[np.concatenate([head[_order(s, cand_ids[head])], o[k:]])])
    return out


@dataclass
class EvalReport:
    speech_to_image: dict[str, float]
    image_to_speech: dict[str, float]
    mean: dict[str, float]
    k: int
    n_queries: dict[str, int]
    reranked: bool
    seed: int | None = None
    config_hash: str | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"speech_to_image": self.speech_to_image, "image_to_speech": self.image_to_speech,
               "mean": self.mean, "k": self.k, "n_queries": self.n_queries, "reranked": self.reranked,
               "config_hash": self.config_hash, "seed": self.seed}
        out.update(self.extra)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        cols = [f"R@{k}" for k in RECALL_KS]
        head = f"{'':<8}" + "".join(f"{'Speech -> Image':^24}{'Image -> Speech':^24}{'Mean':^24}")
        sub = f"{'':<8}" + "".join(f"{c:>8}" for _ in range(3) for c in cols)
        vals = [self.speech_to_image, self.image_to_speech, self.mean]
        row = f"{'Ours':<8}" + "".join(f"{100 * v[f'r{k}']:>8.1f}" for v in vals for k in RECALL_KS)
        return "\n".join([head, sub, row])


def evaluate(state: ModelState, ds: PairedDataset, k: int = DEFAULT_RERANK_K, rerank: bool = True,
             seed: int | None = None, config_hash: str | None = None) -> EvalReport:
    """R@{1,5,10} in both directions; the mean column averages the two directions."""
    if ds.num_images == 0 or ds.num_speech == 0:
        raise ContractError("cannot evaluate an empty split")
    sp, im = speech_bank(state, ds), image_bank(state, ds)
    sims = pairwise_similarity(sp.cls, im.cls)

    def s2i_scores(q, c):
        return match_scores(state, sp.rows(q), im.rows(c))

    def i2s_scores(q, c):
        return match_scores(state, sp.rows(c), im.rows(q))

    s2i = _rank_all(sims, im.ids, k, s2i_scores if rerank else None)
    i2s = _rank_all(sims.T, sp.ids, k, i2s_scores if rerank else None)
    groups = ds.captions_by_image()
    gt_s2i = [{int(i)} for i in ds.speech_image_ids]
    gt_i2s = [set(int(x) for x in ds.speech_ids[groups[int(i)]]) for i in im.ids]

    res_s2i = {f"r{K}": recall_at_k(s2i, gt_s2i, K) for K in RECALL_KS}
    res_i2s = {f"r{K}": recall_at_k(i2s, gt_i2s, K) for K in RECALL_KS}
    mean = {key: (res_s2i[key] + res_i2s[key]) / 2 for key in res_s2i}
    return EvalReport(res_s2i, res_i2s, mean, k=min(k, ds.num_images) if rerank else 0,
                      n_queries={"speech_to_image": len(s2i), "image_to_speech": len(i2s)},
                      reranked=rerank, seed=seed, config_hash=config_hash)
