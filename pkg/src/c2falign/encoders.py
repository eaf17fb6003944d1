"""Speech/image encoders, the momentum teacher, fusion encoder and matching head.

Parameters live in flat name -> Tensor dicts grouped by role:

* ``speech``  student speech encoder incl. the layer-weighting logits
* ``teacher`` EMA copy of ``speech`` (never trained directly)
* ``image``   frozen random projection standing in for a pretrained encoder
* ``fusion``  multimodal self-attention encoder over concatenated tokens
* ``sim``     two-way match classifier
* ``tau``     learnable softmax temperature
"""
from __future__ import annotations

import contextlib
import copy
import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DomainError, ShapeError
from .tensor import Tensor

TAU_MIN = 1e-4
TAU_MAX = 1.0
POS_INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 32
    speech_layers: int = 4
    speech_tokens: int = 8
    image_tokens: int = 4
    dim: int = 64
    heads: int = 4
    depth: int = 2
    mlp_ratio: int = 2
    tau_init: float = 0.07

    def __post_init__(self):
        if self.dim % self.heads:
            raise DomainError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.speech_layers < 1:
            raise DomainError("need at least one speech layer")


@dataclass
class SequenceEmbedding:
    """Unit-norm ``cls`` rows ``[B, d]`` plus per-token outputs ``[B, N, d]``."""

    cls: Tensor
    tokens: Tensor


def _block_shapes(prefix: str, d: int, hidden: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.ln1_g": (d,), f"{prefix}.ln1_b": (d,),
        f"{prefix}.q_w": (d, d), f"{prefix}.q_b": (d,),
        f"{prefix}.k_w": (d, d),  # no key bias: softmax is invariant to it
        f"{prefix}.v_w": (d, d), f"{prefix}.v_b": (d,),
        f"{prefix}.o_w": (d, d), f"{prefix}.o_b": (d,),
        f"{prefix}.ln2_g": (d,), f"{prefix}.ln2_b": (d,),
        f"{prefix}.fc1_w": (d, hidden), f"{prefix}.fc1_b": (hidden,),
        f"{prefix}.fc2_w": (hidden, d), f"{prefix}.fc2_b": (d,),
    }


def _init(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf.endswith("_g"):
        return np.ones(shape)
    if leaf.endswith("_b") or leaf == "layer_logits":
        return np.zeros(shape)
    if leaf in ("cls", "pos"):
        return POS_INIT_STD * rng.standard_normal(shape)
    return rng.standard_normal(shape) / math.sqrt(shape[0])


class ModelState:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        d, hidden = cfg.dim, cfg.dim * cfg.mlp_ratio

        speech_shapes = {
            "layer_logits": (cfg.speech_layers,),
            "proj_w": (cfg.feature_dim, d), "proj_b": (d,),
            "cls": (d,), "pos": (cfg.speech_tokens + 1, d),
        }
        for i in range(cfg.depth):
            speech_shapes.update(_block_shapes(f"block{i}", d, hidden))
        speech_shapes.update({"lnf_g": (d,), "lnf_b": (d,), "head_w": (d, d), "head_b": (d,)})

        fusion_len = 3 + cfg.speech_tokens + cfg.image_tokens
        fusion_shapes = {"cls": (d,), "pos": (fusion_len, d)}
        for i in range(cfg.depth):
            fusion_shapes.update(_block_shapes(f"block{i}", d, hidden))
        fusion_shapes.update({"lnf_g": (d,), "lnf_b": (d,)})

        def build(shapes, trainable):
            return {k: Tensor(_init(k, s, rng), requires_grad=trainable, name=k) for k, s in shapes.items()}

        self.speech = build(speech_shapes, True)
        self.fusion = build(fusion_shapes, True)
        self.image = {
            "proj_w": Tensor(rng.standard_normal((cfg.feature_dim, d)) / math.sqrt(cfg.feature_dim)),
            "proj_b": Tensor(np.zeros(d)),
        }
        # zero head gives the symmetric [0.5, 0.5] start
        self.sim = {"w": Tensor(np.zeros((d, 2)), requires_grad=True, name="w"),
                    "b": Tensor(np.zeros(2), requires_grad=True, name="b")}
        self.tau = Tensor(cfg.tau_init, requires_grad=True, name="tau")
        self.teacher = {k: Tensor(v.data.copy(), name=k) for k, v in self.speech.items()}

    # -- parameter views ------------------------------------------------
    def student_params(self) -> list[tuple[str, Tensor]]:
        out = [(f"speech.{k}", v) for k, v in self.speech.items()]
        out += [(f"fusion.{k}", v) for k, v in self.fusion.items()]
        out += [(f"sim.{k}", v) for k, v in self.sim.items()]
        out.append(("tau", self.tau))
        return out

    def all_arrays(self) -> dict[str, np.ndarray]:
        """Every parameter array keyed by a unique group-qualified name."""
        out = {name: t.data for name, t in self.student_params()}
        out.update({f"teacher.{k}": v.data for k, v in self.teacher.items()})
        out.update({f"image.{k}": v.data for k, v in self.image.items()})
        return out

    def zero_grad(self) -> None:
        for _, p in self.student_params():
            p.zero_grad()

    def clamp_temperature(self) -> None:
        np.clip(self.tau.data, TAU_MIN, TAU_MAX, out=self.tau.data)

    def image_param_hash(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.image):
            h.update(k.encode())
            h.update(self.image[k].data.tobytes())
        return h.hexdigest()

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.all_arrays().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    def clone(self) -> "ModelState":
        return copy.deepcopy(self)


# -- building blocks ----------------------------------------------------------
def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add_trailing(T.matmul(x, w), b)


def _attention(h: Tensor, p: dict[str, Tensor], prefix: str, heads: int) -> Tensor:
    B, L, d = h.shape
    dh = d // heads

    def split(x):
        return T.transpose(T.reshape(x, (B, L, heads, dh)), (0, 2, 1, 3))

    q = split(_linear(h, p[f"{prefix}.q_w"], p[f"{prefix}.q_b"]))
    k = split(T.matmul(h, p[f"{prefix}.k_w"]))
    v = split(_linear(h, p[f"{prefix}.v_w"], p[f"{prefix}.v_b"]))
    att = T.softmax_rows(T.mul(T.matmul(q, T.swap_last(k)), 1.0 / math.sqrt(dh)))
    ctx = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (B, L, d))
    return _linear(ctx, p[f"{prefix}.o_w"], p[f"{prefix}.o_b"])


def _block(h: Tensor, p: dict[str, Tensor], prefix: str, heads: int) -> Tensor:
    a = T.layer_norm(h, p[f"{prefix}.ln1_g"], p[f"{prefix}.ln1_b"])
    h = h + _attention(a, p, prefix, heads)
    m = T.layer_norm(h, p[f"{prefix}.ln2_g"], p[f"{prefix}.ln2_b"])
    m = _linear(T.gelu(_linear(m, p[f"{prefix}.fc1_w"], p[f"{prefix}.fc1_b"])),
                p[f"{prefix}.fc2_w"], p[f"{prefix}.fc2_b"])
    return h + m


def _broadcast_rows(vec: Tensor, batch: int) -> Tensor:
    """Repeat a learned ``[d]`` vector as a ``[batch, 1, d]`` token."""
    return T.add_trailing(Tensor(np.zeros((batch, 1, vec.shape[0]))), vec)


def _transformer(h: Tensor, p: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    for i in range(cfg.depth):
        h = _block(h, p, f"block{i}", cfg.heads)
    return T.layer_norm(h, p["lnf_g"], p["lnf_b"])


# -- public operations -------------------------------------------------------
def weighted_layer_sum(layers, layer_logits: Tensor, axis: int = 0) -> Tensor:
    """Softmax-weighted sum of stacked layer features along ``axis``."""
    layers = T.as_tensor(layers)
    if layer_logits.ndim != 1 or layer_logits.shape[0] == 0:
        raise DomainError("need at least one layer logit")
    return T.weighted_sum(layers, T.softmax_rows(layer_logits), axis=axis)


def _as_batch(features, tail: tuple[int, ...], what: str) -> np.ndarray:
    x = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=np.float64)
    if x.shape == tail:
        x = x[None]
    if x.ndim != len(tail) + 1 or x.shape[1:] != tail:
        raise ShapeError(f"{what}: expected [..., {', '.join(map(str, tail))}], got {x.shape}")
    return x


def encode_speech(features, state: ModelState, use_teacher: bool = False) -> SequenceEmbedding:
    """Encode ``[B, L, N, d_in]`` (or a single ``[L, N, d_in]``) speech features.

    The teacher path reads the EMA parameters and records no graph.
    """
    cfg = state.cfg
    x = _as_batch(features, (cfg.speech_layers, cfg.speech_tokens, cfg.feature_dim), "encode_speech")
    p = state.teacher if use_teacher else state.speech
    ctx = T.no_grad() if use_teacher else contextlib.nullcontext()
    with ctx:
        B = x.shape[0]
        h = weighted_layer_sum(Tensor(x), p["layer_logits"], axis=1)
        h = _linear(h, p["proj_w"], p["proj_b"])
        h = T.add_trailing(T.concat([_broadcast_rows(p["cls"], B), h], axis=1), p["pos"])
        h = _transformer(h, p, cfg)
        cls = T.l2_normalize_rows(_linear(h[:, 0], p["head_w"], p["head_b"]))
        return SequenceEmbedding(cls=cls, tokens=h[:, 1:])


def encode_image(features, state: ModelState) -> SequenceEmbedding:
    """Frozen projection of ``[B, N, d_in]`` image tokens; cls is the normalized token mean."""
    cfg = state.cfg
    x = _as_batch(features, (cfg.image_tokens, cfg.feature_dim), "encode_image")
    with T.no_grad():
        tokens = x @ state.image["proj_w"].data + state.image["proj_b"].data
        cls = T.l2_normalize_rows(Tensor(tokens.mean(axis=1)))
    return SequenceEmbedding(cls=cls, tokens=Tensor(tokens))


def momentum_update(state: ModelState, m: float) -> None:
    """teacher <- m * teacher + (1 - m) * student, in place."""
    if not 0.0 <= m <= 1.0:
        raise DomainError(f"momentum coefficient must lie in [0, 1], got {m}")
    for k, t in state.teacher.items():
        s = state.speech[k].data
        if t.shape != s.shape:
            raise ShapeError(f"teacher/student shape mismatch for {k}: {t.shape} vs {s.shape}")
        t.data *= m
        t.data += (1.0 - m) * s


def fuse_multimodal(speech_cls: Tensor, speech_tokens: Tensor, image_cls, image_tokens,
                    state: ModelState) -> Tensor:
    """Joint-CLS output for ``M`` speech/image pairs, shape ``[M, d]``.

    Token order is ``[joint; S_cls; S_1..S_N; I_cls; I_1..I_N]``.
    """
    cfg, p = state.cfg, state.fusion
    image_cls, image_tokens = T.as_tensor(image_cls), T.as_tensor(image_tokens)
    M, d = speech_cls.shape
    for name, t, want in (("speech tokens", speech_tokens, (M, cfg.speech_tokens, d)),
                          ("image cls", image_cls, (M, d)),
                          ("image tokens", image_tokens, (M, cfg.image_tokens, d))):
        if t.shape != want:
            raise ShapeError(f"fuse_multimodal: {name} {t.shape}, expected {want}")
    seq = T.concat([
        _broadcast_rows(p["cls"], M),
        T.reshape(speech_cls, (M, 1, d)), speech_tokens,
        T.reshape(image_cls, (M, 1, d)), image_tokens,
    ], axis=1)
    h = _transformer(T.add_trailing(seq, p["pos"]), p, cfg)
    return h[:, 0]


def fuse_embeddings(speech: SequenceEmbedding, image: SequenceEmbedding, state: ModelState) -> Tensor:
    return fuse_multimodal(speech.cls, speech.tokens, image.cls, image.tokens, state)


def sim_head(joint: Tensor, state: ModelState) -> Tensor:
    """Two-way probabilities ``[M, 2]``; column 1 is the match class."""
    joint = T.as_tensor(joint)
    if joint.ndim == 1:
        joint = T.reshape(joint, (1, joint.shape[0]))
    return T.softmax_rows(_linear(joint, state.sim["w"], state.sim["b"]))
