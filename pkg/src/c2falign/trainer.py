"""Training loop: schedule, coupled-L2 Adam, the joint step and checkpoints."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .datasynth import PairedDataset
from .encoders import ModelConfig, ModelState, encode_image, encode_speech, fuse_multimodal, \
    momentum_update, sim_head
from .errors import (BadMagicError, ChecksumError, ConfigError, ContractError, NonFiniteError,
                     TruncatedFileError, VersionMismatchError)
from .losses import (ContrastiveBatchView, LossBundle, build_multi_positive_targets,
                     momentum_pseudo_targets, sic_loss, sic_mod_loss, sic_probabilities, sim_loss,
                     total_loss)
from .memqueue import EmbeddingQueue, sample_hard_negatives
from .tensor import Tensor

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    total_steps: int = 2000
    warmup_steps: int = 200
    peak_lr: float = 1e-3
    floor_lr: float = 1e-8
    weight_decay: float = 1e-6
    momentum: float = 0.998
    alpha: float = 0.4
    queue_capacity: int = 256
    seed: int = 0
    use_queue: bool = True
    use_mod: bool = True
    use_sim_hard: bool = True

    def __post_init__(self):
        for name, f in self.__dataclass_fields__.items():
            value = getattr(self, name)
            if f.type in ("bool", bool):
                if not isinstance(value, bool):
                    raise ConfigError(f"{name} must be a boolean, got {value!r}")
            elif f.type in ("int", int):
                if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                    raise ConfigError(f"{name} must be an integer, got {value!r}")
            elif isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{name} must be a number, got {value!r}")
        if self.batch_size < 1 or self.queue_capacity < 1:
            raise ConfigError("batch_size and queue_capacity must be positive")
        if self.batch_size > self.queue_capacity:
            raise ConfigError("batch_size may not exceed queue_capacity")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError("need 0 <= warmup_steps < total_steps")
        if not 0 < self.floor_lr <= self.peak_lr:
            raise ConfigError("need 0 < floor_lr <= peak_lr")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if not 0 <= self.momentum <= 1 or not 0 <= self.alpha <= 1:
            raise ConfigError("momentum and alpha must lie in [0, 1]")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        unknown = sorted(set(raw) - set(cls.__dataclass_fields__))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**raw)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(raw)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


# Full-scale setting reported for the smaller benchmark corpus.
FULL_SCALE_PRESET = TrainConfig(batch_size=256, total_steps=40_000, warmup_steps=4_000, peak_lr=1e-4,
                           floor_lr=1e-8, weight_decay=1e-6, momentum=0.998, alpha=0.4,
                           queue_capacity=1024)


def config_hash(train_cfg: TrainConfig, model_cfg: ModelConfig) -> str:
    doc = json.dumps({"train": train_cfg.to_dict(), "model": dataclasses.asdict(model_cfg)},
                     sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()[:16]


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup 0 -> peak, then linear decay peak -> floor at ``total_steps``."""
    if not 0 <= step <= cfg.total_steps:
        raise ContractError(f"step {step} outside [0, {cfg.total_steps}]")
    if step <= cfg.warmup_steps:
        return cfg.peak_lr if cfg.warmup_steps == 0 else cfg.peak_lr * step / cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.peak_lr + (cfg.floor_lr - cfg.peak_lr) * frac


def alpha_at(step: int, cfg: TrainConfig) -> float:
    """Distillation weight: linear ramp 0 -> alpha over the first half of training.

    The EMA teacher starts as a copy of a random student and needs on the order of
    ``1 / (1 - m)`` steps to carry useful structure, so early pseudo-targets are noise.
    """
    if not 0 <= step <= cfg.total_steps:
        raise ContractError(f"step {step} outside [0, {cfg.total_steps}]")
    ramp = cfg.total_steps // 2
    return cfg.alpha if ramp == 0 else cfg.alpha * min(1.0, step / ramp)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params, opt: OptimizerState, lr: float, weight_decay: float) -> None:
    """Bias-corrected Adam with L2 decay folded into the gradient.

    ``params`` is a sequence of ``(name, Tensor)``; updates are in place.
    """
    params = list(params)
    for name, p in params:
        if p.grad is None or not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient for {name} at optimizer step {opt.step + 1}")
    opt.step += 1
    b1, b2 = ADAM_BETAS
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    for name, p in params:
        g = p.grad + weight_decay * p.data
        if name not in opt.m:
            opt.m[name] = np.zeros_like(p.data)
            opt.v[name] = np.zeros_like(p.data)
        m, v = opt.m[name], opt.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


@dataclass
class Batch:
    speech_feats: np.ndarray   # [B, L, N, d_in]
    image_ids: np.ndarray      # [B], image paired with each speech
    image_cls: np.ndarray      # [B, d], frozen embeddings
    image_tokens: np.ndarray   # [B, N_img, d]


def _step_diagnostics(opt: OptimizerState, parts: dict[str, float]) -> str:
    body = ", ".join(f"{k}={v!r}" for k, v in parts.items())
    return f"non-finite loss at step {opt.step + 1}: {body}"


def train_step(state: ModelState, opt: OptimizerState, queue: EmbeddingQueue, batch: Batch,
               cfg: TrainConfig, rng: np.random.Generator) -> LossBundle:
    """One joint update; the learning rate comes from ``lr_at(opt.step + 1)``."""
    if opt.step >= cfg.total_steps:
        raise ContractError(f"training already finished ({opt.step} steps)")
    B = len(batch.image_ids)
    state.zero_grad()

    speech = encode_speech(batch.speech_feats, state)
    if cfg.use_queue and len(queue):
        snap = queue.snapshot()
        cand_cls = np.concatenate([snap.cls, batch.image_cls])
        cand_ids = np.concatenate([snap.ids, batch.image_ids])
        cand_tokens = np.concatenate([snap.tokens, batch.image_tokens])
    else:
        cand_cls, cand_ids, cand_tokens = batch.image_cls, batch.image_ids, batch.image_tokens

    view = ContrastiveBatchView(speech.cls, Tensor(cand_cls), cand_ids, Tensor(batch.image_cls),
                                batch.image_ids, state.tau)
    p_s2i, p_i2s = sic_probabilities(view)
    y_s2i = build_multi_positive_targets(batch.image_ids, cand_ids)
    y_i2s = build_multi_positive_targets(batch.image_ids, batch.image_ids)
    l_sic = sic_loss(p_s2i, p_i2s, y_s2i, y_i2s)

    if cfg.use_mod:
        teacher = encode_speech(batch.speech_feats, state, use_teacher=True)
        q_s2i = momentum_pseudo_targets(teacher.cls, cand_cls, state.tau)
        l_mod = sic_mod_loss(l_sic, q_s2i, p_s2i, alpha_at(opt.step, cfg))
    else:
        l_mod = l_sic

    l_sim, n_neg = 0.0, 0
    if cfg.use_sim_hard:
        neg = sample_hard_negatives(p_s2i.data, cand_ids, batch.image_ids, rng)
        rows = np.flatnonzero(neg >= 0)
        n_neg = len(rows)
        sel = np.concatenate([np.arange(B), rows])
        img_cls = np.concatenate([batch.image_cls, cand_cls[neg[rows]]])
        img_tok = np.concatenate([batch.image_tokens, cand_tokens[neg[rows]]])
        joint = fuse_multimodal(speech.cls[sel], speech.tokens[sel], img_cls, img_tok, state)
        labels = np.concatenate([np.ones(B, dtype=np.int64), np.zeros(n_neg, dtype=np.int64)])
        l_sim = sim_loss(sim_head(joint, state), labels)

    l_total = total_loss(l_mod, l_sim)
    parts = {"l_sic": l_sic.item(), "l_sic_mod": l_mod.item(),
             "l_sim": float(l_sim.item() if isinstance(l_sim, Tensor) else l_sim),
             "l_total": l_total.item()}
    if not all(np.isfinite(v) for v in parts.values()):
        raise NonFiniteError(_step_diagnostics(opt, parts))

    T.backward(l_total)
    adam_step(state.student_params(), opt, lr_at(opt.step + 1, cfg), cfg.weight_decay)
    state.clamp_temperature()
    momentum_update(state, cfg.momentum)
    if cfg.use_queue:
        queue.enqueue_batch(batch.image_ids, batch.image_cls, batch.image_tokens)
    return LossBundle(p_s2i=p_s2i.data, n_sim_negatives=n_neg, **parts)


def model_config_for(ds: PairedDataset, **overrides) -> ModelConfig:
    _, layers, tokens, dim = ds.speech_feats.shape
    return ModelConfig(feature_dim=dim, speech_layers=layers, speech_tokens=tokens,
                       image_tokens=ds.image_feats.shape[1], **overrides)


def _substreams(seed: int) -> dict[str, np.random.Generator]:
    names = ("init", "sampler", "hardneg")
    seqs = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.Generator(np.random.PCG64(s)) for n, s in zip(names, seqs)}


class Trainer:
    """Owns model, optimizer, queue and RNG substreams for one run."""

    def __init__(self, cfg: TrainConfig, data: PairedDataset, model_cfg: ModelConfig | None = None):
        self.cfg = cfg
        self.data = data
        self.rngs = _substreams(cfg.seed)
        self.model_cfg = model_cfg or model_config_for(data)
        self.state = ModelState(self.model_cfg, self.rngs["init"])
        self.opt = OptimizerState()
        self.queue = EmbeddingQueue(cfg.queue_capacity, self.model_cfg.dim, self.model_cfg.image_tokens)
        self.history: list[float] = []
        self._index_data()

    def _index_data(self) -> None:
        emb = encode_image(self.data.image_feats, self.state)
        self._image_cls = emb.cls.data
        self._image_tokens = emb.tokens.data
        groups = self.data.captions_by_image()
        self._captions = [groups[int(i)] for i in self.data.image_ids]

    @property
    def step(self) -> int:
        return self.opt.step

    def sample_batch(self) -> Batch:
        """Images uniformly with replacement, then one caption per draw."""
        rng = self.rngs["sampler"]
        rows = rng.integers(0, self.data.num_images, size=self.cfg.batch_size)
        caps = np.array([self._captions[r][rng.integers(len(self._captions[r]))] for r in rows])
        return Batch(speech_feats=self.data.speech_feats[caps], image_ids=self.data.image_ids[rows],
                     image_cls=self._image_cls[rows], image_tokens=self._image_tokens[rows])

    def train_step(self) -> LossBundle:
        out = train_step(self.state, self.opt, self.queue, self.sample_batch(), self.cfg,
                         self.rngs["hardneg"])
        self.history.append(out.l_total)
        return out

    def run(self, steps: int | None = None, log_every: int = 0) -> list[float]:
        """Train ``steps`` more steps (default: to completion); returns the loss history."""
        end = self.cfg.total_steps if steps is None else min(self.step + steps, self.cfg.total_steps)
        while self.step < end:
            out = self.train_step()
            if log_every and self.step % log_every == 0:
                log.info("step %d  l_total=%.4f  l_sic=%.4f  l_sim=%.4f  tau=%.4f", self.step,
                         out.l_total, out.l_sic, out.l_sim, self.state.tau.item())
        return self.history

    def save(self, path) -> None:
        save_checkpoint(self.state, self.opt, self.queue, self.step, path, train_cfg=self.cfg,
                        rngs=self.rngs, history=self.history)

    @classmethod
    def resume(cls, path, data: PairedDataset) -> "Trainer":
        ck = load_checkpoint(path)
        self = cls.__new__(cls)
        self.cfg, self.data, self.model_cfg = ck.train_cfg, data, ck.state.cfg
        self.state, self.opt, self.queue = ck.state, ck.opt, ck.queue
        self.rngs = _substreams(ck.train_cfg.seed)
        for name, st in ck.rng_states.items():
            self.rngs[name].bit_generator.state = st
        self.history = list(ck.history)
        self._index_data()
        return self


# -- checkpoints -------------------------------------------------------------
CKPT_MAGIC = b"C2FK"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sIQ")
_U32 = struct.Struct("<I")


@dataclass
class Checkpoint:
    state: ModelState
    opt: OptimizerState
    queue: EmbeddingQueue
    step: int
    train_cfg: TrainConfig
    rng_states: dict = field(default_factory=dict)
    history: list[float] = field(default_factory=list)


def _ckpt_arrays(state: ModelState, opt: OptimizerState, queue: EmbeddingQueue):
    arrays = {f"param/{k}": v for k, v in sorted(state.all_arrays().items())}
    arrays.update({f"adam_m/{k}": v for k, v in sorted(opt.m.items())})
    arrays.update({f"adam_v/{k}": v for k, v in sorted(opt.v.items())})
    arrays.update({f"queue/{k}": v for k, v in queue.state_arrays().items()})
    return arrays


def save_checkpoint(state: ModelState, opt: OptimizerState, queue: EmbeddingQueue, step: int, path,
                    train_cfg: TrainConfig | None = None, rngs: dict | None = None,
                    history: list[float] | None = None) -> None:
    """Binary checkpoint: header, JSON index, raw little-endian arrays, CRC32 trailer."""
    arrays = _ckpt_arrays(state, opt, queue)
    meta = {
        "train_config": (train_cfg or TrainConfig()).to_dict(),
        "model_config": dataclasses.asdict(state.cfg),
        "rng": {k: g.bit_generator.state for k, g in (rngs or {}).items()},
        "queue": {"capacity": queue.capacity, "head": queue.head, "fill": queue.fill},
        "opt_step": opt.step,
        "history": list(history or []),
        "arrays": [{"name": k, "dtype": np.dtype(v.dtype).str.lstrip("<>|="), "shape": list(v.shape)}
                   for k, v in arrays.items()],
    }
    blob = json.dumps(meta).encode()
    parts = [_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, step), _U32.pack(len(blob)), blob]
    for v in arrays.values():
        parts.append(np.ascontiguousarray(v, dtype=v.dtype.newbyteorder("<")).tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + _U32.pack(zlib.crc32(body)))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEAD.size + _U32.size:
        raise TruncatedFileError(f"{path}: too short for a checkpoint header")
    magic, version, step = _CKPT_HEAD.unpack_from(raw, 0)
    if magic != CKPT_MAGIC:
        raise BadMagicError(f"{path}: magic {magic!r} != {CKPT_MAGIC!r}")
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {CKPT_VERSION}")
    pos = _CKPT_HEAD.size
    (meta_len,) = _U32.unpack_from(raw, pos)
    pos += _U32.size
    if len(raw) < pos + meta_len + _U32.size:
        raise TruncatedFileError(f"{path}: index runs past end of file")
    try:
        meta = json.loads(raw[pos:pos + meta_len])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ChecksumError(f"{path}: index is corrupt ({exc})") from exc
    pos += meta_len
    sizes = [int(np.prod(a["shape"])) * np.dtype(a["dtype"]).itemsize for a in meta["arrays"]]
    expected = pos + sum(sizes) + _U32.size
    if len(raw) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, found {len(raw)}")
    (crc,) = _U32.unpack_from(raw, len(raw) - _U32.size)
    if len(raw) != expected or zlib.crc32(raw[:-_U32.size]) != crc:
        raise ChecksumError(f"{path}: CRC32 mismatch")

    arrays = {}
    for spec, nbytes in zip(meta["arrays"], sizes):
        dt = np.dtype(spec["dtype"]).newbyteorder("<")
        arrays[spec["name"]] = np.frombuffer(raw, dtype=dt, count=nbytes // dt.itemsize,
                                             offset=pos).reshape(spec["shape"]).astype(dt.newbyteorder("="))
        pos += nbytes

    model_cfg = ModelConfig(**meta["model_config"])
    state = ModelState(model_cfg, np.random.default_rng(0))
    groups = {"speech": state.speech, "fusion": state.fusion, "sim": state.sim,
              "teacher": state.teacher, "image": state.image}
    for name, arr in arrays.items():
        kind, _, key = name.partition("/")
        if kind != "param":
            continue
        if key == "tau":
            state.tau.data[...] = arr
            continue
        group, _, leaf = key.partition(".")
        groups[group][leaf].data[...] = arr
    state.zero_grad()

    opt = OptimizerState(step=meta["opt_step"])
    for name, arr in arrays.items():
        kind, _, key = name.partition("/")
        if kind == "adam_m":
            opt.m[key] = arr.copy()
        elif kind == "adam_v":
            opt.v[key] = arr.copy()
    q = meta["queue"]
    queue = EmbeddingQueue.from_arrays(arrays["queue/ids"], arrays["queue/cls"], arrays["queue/tokens"],
                                       q["head"], q["fill"])
    return Checkpoint(state=state, opt=opt, queue=queue, step=step,
                      train_cfg=TrainConfig.from_dict(meta["train_config"]),
                      rng_states=meta["rng"], history=meta["history"])
