"""Synthetic paired speech/image features with planted class structure.

Random numbers come from numpy's PCG64 bit generator seeded directly with
the config seed, so identical configs produce identical bytes everywhere
numpy's ``Generator`` stream is stable.

Generative story, per image ``i`` of class ``c``:

* latent ``z_i = proto_c + instance_spread * sigma * noise`` (shared by both modalities)
* image token ``t``: ``A_img @ z_i + sigma * noise``
* caption latent is ``z_i``, or for a weak pair ``0.5 z_i + 0.5 proto_c'``
* clean speech token ``t``: ``A_sp @ z_caption + sigma * noise``
* speech layer ``l``: ``M_l @ clean + sigma * layer_noise[l] * noise``

The instance term gives same-class images distinct fine detail, which is what
hard negatives discriminate. It scales with ``sigma`` so a noise-free config
collapses every image onto its class prototype.
"""
from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ContractError, FormatError, TruncatedFileError, VersionMismatchError

FEATURE_MAGIC = b"C2FA"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")
MANIFEST_NAME = "manifest.txt"


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 32
    images_per_class: int = 8
    captions_per_image: int = 5
    speech_layers: int = 4
    speech_tokens: int = 8
    image_tokens: int = 4
    feature_dim: int = 32
    noise_sigma: float = 0.3
    weak_pair_rate: float = 0.1
    seed: int = 0
    latent_dim: int = 16
    instance_spread: float = 1.5
    test_images_per_class: int = 1

    def __post_init__(self):
        for name in ("num_classes", "images_per_class", "captions_per_image", "speech_layers",
                     "speech_tokens", "image_tokens", "feature_dim", "latent_dim"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.noise_sigma < 0 or self.instance_spread < 0:
            raise ContractError("noise scales must be nonnegative")
        if not 0.0 <= self.weak_pair_rate <= 1.0:
            raise ContractError(f"weak_pair_rate must lie in [0, 1], got {self.weak_pair_rate}")
        if not 0 <= self.test_images_per_class < self.images_per_class:
            raise ContractError("test_images_per_class must leave at least one training image")


@dataclass
class PairedDataset:
    """One split of image items and the speech captions that reference them.

    ``image_feats`` is ``[num_images, image_tokens, dim]``; ``speech_feats`` is
    ``[num_speech, layers, speech_tokens, dim]``. ``image_classes`` and
    ``weak`` are generation-time ground truth and are not serialized.
    """

    image_ids: np.ndarray
    image_feats: np.ndarray
    speech_ids: np.ndarray
    speech_image_ids: np.ndarray
    speech_feats: np.ndarray
    split: str = "all"
    image_classes: np.ndarray | None = field(default=None, compare=False)
    weak: np.ndarray | None = field(default=None, compare=False)

    @property
    def num_images(self) -> int:
        return len(self.image_ids)

    @property
    def num_speech(self) -> int:
        return len(self.speech_ids)

    def captions_by_image(self) -> dict[int, np.ndarray]:
        """Speech row indices grouped by image id."""
        groups: dict[int, list[int]] = {int(i): [] for i in self.image_ids}
        for row, iid in enumerate(self.speech_image_ids):
            groups[int(iid)].append(row)
        return {k: np.array(v, dtype=np.int64) for k, v in groups.items()}

    def image_row(self) -> dict[int, int]:
        return {int(i): r for r, i in enumerate(self.image_ids)}

    def validate(self, captions_per_image: int | None = None) -> None:
        known = set(int(i) for i in self.image_ids)
        missing = [int(i) for i in self.speech_image_ids if int(i) not in known]
        if missing:
            raise ContractError(f"speech items reference unknown images {missing[:5]}")
        if captions_per_image is not None:
            sizes = {k: len(v) for k, v in self.captions_by_image().items()}
            bad = {k: n for k, n in sizes.items() if n != captions_per_image}
            if bad:
                raise ContractError(f"images with wrong caption count: {dict(list(bad.items())[:5])}")


def same_content(a: PairedDataset, b: PairedDataset) -> bool:
    """Bitwise equality of every serialized field."""
    pairs = [(a.image_ids, b.image_ids), (a.image_feats, b.image_feats), (a.speech_ids, b.speech_ids),
             (a.speech_image_ids, b.speech_image_ids), (a.speech_feats, b.speech_feats)]
    return a.split == b.split and all(
        x.shape == y.shape and x.dtype == y.dtype and x.tobytes() == y.tobytes() for x, y in pairs
    )


def layer_noise_profile(layers: int) -> np.ndarray:
    """Per-layer noise multipliers; cleanest around two thirds of the depth."""
    if layers == 1:
        return np.ones(1)
    best = round(2 * (layers - 1) / 3)
    return 0.5 + 2.5 * np.abs(np.arange(layers) - best) / (layers - 1)


@dataclass
class _Views:
    prototypes: np.ndarray
    image_views: np.ndarray
    speech_views: np.ndarray
    layer_mix: np.ndarray


def _draw_views(cfg: SynthConfig, rng: np.random.Generator) -> _Views:
    k, d = cfg.latent_dim, cfg.feature_dim
    protos = rng.standard_normal((cfg.num_classes, k))
    img = rng.standard_normal((d, k)) / np.sqrt(k)
    sp = rng.standard_normal((d, k)) / np.sqrt(k)
    mix = np.empty((cfg.speech_layers, d, d))
    for layer in range(cfg.speech_layers):
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        mix[layer] = 0.5 * np.eye(d) + 0.5 * q
    return _Views(protos, img, sp, mix)


def generate_dataset(cfg: SynthConfig) -> PairedDataset:
    """Draw the full corpus (``split="all"``); see :func:`train_test_split`."""
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    v = _draw_views(cfg, rng)
    n_img = cfg.num_classes * cfg.images_per_class
    classes = np.repeat(np.arange(cfg.num_classes), cfg.images_per_class)
    spread = cfg.instance_spread * cfg.noise_sigma
    latents = v.prototypes[classes] + spread * rng.standard_normal((n_img, cfg.latent_dim))

    image_feats = np.repeat((latents @ v.image_views.T)[:, None], cfg.image_tokens, axis=1)
    image_feats += cfg.noise_sigma * rng.standard_normal(image_feats.shape)

    n_sp = n_img * cfg.captions_per_image
    speech_image = np.repeat(np.arange(n_img), cfg.captions_per_image)
    weak = rng.random(n_sp) < cfg.weak_pair_rate
    # other class drawn uniformly among the remaining classes
    offset = rng.integers(1, max(cfg.num_classes, 2), size=n_sp)
    other = (classes[speech_image] + offset) % cfg.num_classes
    cap_latent = latents[speech_image].copy()
    if cfg.num_classes > 1:
        cap_latent[weak] = 0.5 * cap_latent[weak] + 0.5 * v.prototypes[other[weak]]
    else:
        weak[:] = False

    clean = np.repeat((cap_latent @ v.speech_views.T)[:, None], cfg.speech_tokens, axis=1)
    clean += cfg.noise_sigma * rng.standard_normal(clean.shape)
    profile = layer_noise_profile(cfg.speech_layers)
    speech = np.einsum("lde,ste->slte", v.layer_mix, clean)
    speech += cfg.noise_sigma * profile[None, :, None, None] * rng.standard_normal(speech.shape)

    return PairedDataset(
        image_ids=np.arange(n_img, dtype=np.int64),
        image_feats=np.ascontiguousarray(image_feats),
        speech_ids=np.arange(n_sp, dtype=np.int64),
        speech_image_ids=speech_image.astype(np.int64),
        speech_feats=np.ascontiguousarray(speech),
        split="all",
        image_classes=classes,
        weak=weak,
    )


def class_prototype_features(cfg: SynthConfig) -> np.ndarray:
    """Noise-free image features of each class prototype, ``[classes, tokens, dim]``."""
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    v = _draw_views(cfg, rng)
    return np.repeat((v.prototypes @ v.image_views.T)[:, None], cfg.image_tokens, axis=1)


def _subset(ds: PairedDataset, image_mask: np.ndarray, split: str) -> PairedDataset:
    keep_ids = set(int(i) for i in ds.image_ids[image_mask])
    sp_mask = np.array([int(i) in keep_ids for i in ds.speech_image_ids], dtype=bool)
    return PairedDataset(
        image_ids=ds.image_ids[image_mask].copy(),
        image_feats=ds.image_feats[image_mask].copy(),
        speech_ids=ds.speech_ids[sp_mask].copy(),
        speech_image_ids=ds.speech_image_ids[sp_mask].copy(),
        speech_feats=ds.speech_feats[sp_mask].copy(),
        split=split,
        image_classes=None if ds.image_classes is None else ds.image_classes[image_mask].copy(),
        weak=None if ds.weak is None else ds.weak[sp_mask].copy(),
    )


def train_test_split(ds: PairedDataset, cfg: SynthConfig) -> tuple[PairedDataset, PairedDataset]:
    """Hold out the last ``test_images_per_class`` images of every class.

    The split is at image level, so all captions of an image land together.
    """
    if ds.image_classes is None:
        raise ContractError("split needs generation-time class labels")
    pos_in_class = np.arange(ds.num_images) % cfg.images_per_class
    test = pos_in_class >= cfg.images_per_class - cfg.test_images_per_class
    return _subset(ds, ~test, "train"), _subset(ds, test, "test")


# -- binary feature files -------------------------------------------------
def _write_bank(path: Path, ids: np.ndarray, feats: np.ndarray, image_ids: np.ndarray | None) -> None:
    n, layers, tokens, dim = feats.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, n, layers, tokens, dim,
                              int(image_ids is not None)))
        for row in range(n):
            fh.write(struct.pack("<Q", int(ids[row])))
            if image_ids is not None:
                fh.write(struct.pack("<Q", int(image_ids[row])))
            fh.write(np.ascontiguousarray(feats[row], dtype="<f8").tobytes())


def read_bank(path: Path):
    """Decode one bank file into ``(ids, image_ids or None, [n, layers, tokens, dim])``."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedFileError(f"{path}: header needs {_HEADER.size} bytes, file has {len(raw)}")
    magic, version, n, layers, tokens, dim, has_pair = _HEADER.unpack_from(raw, 0)
    if magic != FEATURE_MAGIC:
        raise BadMagicError(f"{path}: magic {magic!r} != {FEATURE_MAGIC!r}")
    if version != FEATURE_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {FEATURE_VERSION}")
    if has_pair not in (0, 1):
        raise FormatError(f"{path}: ids-present flag must be 0 or 1, got {has_pair}")
    payload = layers * tokens * dim * 8
    stride = 8 + 8 * has_pair + payload
    expected = _HEADER.size + n * stride
    if len(raw) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, found {len(raw)}")
    if len(raw) > expected:
        raise FormatError(f"{path}: {len(raw) - expected} trailing bytes")
    rec = np.dtype([("id", "<u8")] + ([("image_id", "<u8")] if has_pair else [])
                   + [("x", "<f8", (layers, tokens, dim))])
    arr = np.frombuffer(raw, dtype=rec, count=n, offset=_HEADER.size)
    ids = arr["id"].astype(np.int64)
    pair = arr["image_id"].astype(np.int64) if has_pair else None
    feats = np.array(arr["x"], dtype=np.float64)
    return ids, pair, feats


def write_features(ds: PairedDataset, directory, manifest: bool = True) -> tuple[Path, Path]:
    """Write the image and speech banks of one split; returns their paths.

    With ``manifest`` the split is also registered in ``manifest.txt``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    img_path = directory / f"images_{ds.split}.c2fa"
    sp_path = directory / f"speech_{ds.split}.c2fa"
    _write_bank(img_path, ds.image_ids, ds.image_feats[:, None], None)
    _write_bank(sp_path, ds.speech_ids, ds.speech_feats, ds.speech_image_ids)
    if manifest:
        _register(directory, ds.split, img_path.name, sp_path.name)
    return img_path, sp_path


def _register(directory: Path, split: str, img: str, sp: str) -> None:
    path = directory / MANIFEST_NAME
    entries = read_manifest(directory) if path.exists() else {}
    entries[split] = (img, sp)
    lines = [f"c2fa-manifest {FEATURE_VERSION}"]
    lines += [f"{name} {a} {b}" for name, (a, b) in sorted(entries.items())]
    path.write_text("\n".join(lines) + "\n")


def read_manifest(directory) -> dict[str, tuple[str, str]]:
    """Map split tag -> (image bank file, speech bank file)."""
    path = Path(directory) / MANIFEST_NAME
    lines = [ln.split() for ln in path.read_text().splitlines() if ln.strip()]
    if not lines or lines[0] != ["c2fa-manifest", str(FEATURE_VERSION)]:
        raise BadMagicError(f"{path}: not a version {FEATURE_VERSION} manifest")
    out = {}
    for parts in lines[1:]:
        if len(parts) != 3:
            raise FormatError(f"{path}: malformed line {' '.join(parts)!r}")
        out[parts[0]] = (parts[1], parts[2])
    return out


def read_features(path, split: str | None = None) -> PairedDataset:
    """Load a split.

    ``path`` is either a data directory (``split`` picks the manifest entry) or
    a speech bank file whose sibling image bank follows the naming scheme.
    """
    path = Path(path)
    if path.is_dir():
        entries = read_manifest(path)
        split = split or "train"
        if split not in entries:
            raise FormatError(f"{path}: manifest has no split {split!r}")
        img_name, sp_name = entries[split]
        img_path, sp_path = path / img_name, path / sp_name
    else:
        sp_path = path
        split = split or sp_path.stem.removeprefix("speech_")
        img_path = sp_path.with_name(f"images_{split}.c2fa")
    img_ids, img_pair, img_feats = read_bank(img_path)
    if img_pair is not None or img_feats.shape[1] != 1:
        raise FormatError(f"{img_path}: not an image bank")
    sp_ids, sp_pair, sp_feats = read_bank(sp_path)
    if sp_pair is None:
        raise FormatError(f"{sp_path}: speech bank lacks image ids")
    ds = PairedDataset(img_ids, img_feats[:, 0], sp_ids, sp_pair, sp_feats, split)
    ds.validate()
    return ds


def config_dict(cfg: SynthConfig) -> dict:
    return dataclasses.asdict(cfg)
