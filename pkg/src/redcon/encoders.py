"""Miniature dual encoders mapping raw patch signals and token ids into a
shared unit-norm feature space.

Pipeline, both modalities: embed -> prepend a learned CLS slot -> (optional)
learned positions -> transformer blocks -> final layer norm -> cross-frame
mean pool (video only) -> linear projection -> row normalization. The video
and text towers use separate projections into the shared space.

Parameters live in a plain dict of float64 numpy arrays keyed by dotted
names; `bind` wraps them as tape leaves for one forward/backward pass.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import (
    ConfigError,
    InputError,
    MalformedHeaderError,
    NumericFaultError,
    ShapeError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from .tensor import Tensor

CHECKPOINT_MAGIC = "redcon-ckpt-v1"


@dataclass
class EncoderConfig:
    """Architecture and input geometry for both towers."""

    hidden: int = 32
    proj_dim: int = 16
    layers: int = 1
    heads: int = 2
    vocab_size: int = 96
    frames: int = 4          # K
    patches: int = 16        # N per frame
    patch_dim: int = 16      # p raw dims per patch
    tokens: int = 8          # L per text
    use_positions: bool = True
    seed: int = 0

    def validate(self) -> None:
        for name in ("hidden", "proj_dim", "layers", "heads", "vocab_size",
                     "frames", "patches", "patch_dim", "tokens"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"EncoderConfig.{name} must be positive")
        if self.hidden % self.heads != 0:
            raise ConfigError(
                f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")


@dataclass
class VideoInput:
    """K frames of N raw patch signals, p dims each."""

    frames: np.ndarray  # (K, N, p)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3:
            raise ShapeError(f"VideoInput.frames must be (K, N, p), got {self.frames.shape}")


@dataclass
class TextInput:
    token_ids: np.ndarray  # (L,)

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        if self.token_ids.ndim != 1 or self.token_ids.size == 0:
            raise ShapeError(f"TextInput.token_ids must be a non-empty vector, got {self.token_ids.shape}")


@dataclass
class FeatureSet:
    """Unit-norm projected features for one modality of one pair."""

    cls: Tensor     # (d,)
    locals: Tensor  # (N or L, d)


def patchify(grid: np.ndarray, patch_size: int) -> np.ndarray:
    """Split a 2-D grid into non-overlapping row-major patches, flattened.

    Returns an (N, patch_size**2) array where N = (H/s)*(W/s).
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ConfigError(f"patchify expects a 2-D grid, got shape {grid.shape}")
    h, w = grid.shape
    s = patch_size
    if s <= 0 or h % s != 0 or w % s != 0:
        raise ConfigError(f"grid {h}x{w} is not divisible by patch size {s}")
    blocks = grid.reshape(h // s, s, w // s, s).transpose(0, 2, 1, 3)
    return blocks.reshape((h // s) * (w // s), s * s)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def init_params(cfg: EncoderConfig) -> dict[str, np.ndarray]:
    """Fresh parameter dict, deterministic in cfg.seed."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    h, d = cfg.hidden, cfg.proj_dim
    scale = 0.02

    params: dict[str, np.ndarray] = {}

    def norm(name, shape):
        params[name] = rng.normal(0.0, scale, size=shape)

    def tower(prefix, seq_len):
        norm(f"{prefix}.cls", (1, h))
        norm(f"{prefix}.pos", (seq_len, h))
        for i in range(cfg.layers):
            blk = f"{prefix}.block{i}"
            params[f"{blk}.ln1.g"] = np.ones(h)
            params[f"{blk}.ln1.b"] = np.zeros(h)
            for w in ("wq", "wk", "wv", "wo"):
                norm(f"{blk}.attn.{w}", (h, h))
            for b in ("bq", "bk", "bv", "bo"):
                params[f"{blk}.attn.{b}"] = np.zeros(h)
            params[f"{blk}.ln2.g"] = np.ones(h)
            params[f"{blk}.ln2.b"] = np.zeros(h)
            norm(f"{blk}.mlp.w1", (h, 4 * h))
            params[f"{blk}.mlp.b1"] = np.zeros(4 * h)
            norm(f"{blk}.mlp.w2", (4 * h, h))
            params[f"{blk}.mlp.b2"] = np.zeros(h)
        params[f"{prefix}.ln_f.g"] = np.ones(h)
        params[f"{prefix}.ln_f.b"] = np.zeros(h)
        norm(f"{prefix}.proj", (h, d))

    norm("video.patch_embed.w", (cfg.patch_dim, h))
    params["video.patch_embed.b"] = np.zeros(h)
    tower("video", cfg.patches + 1)
    norm("text.tok_embed", (cfg.vocab_size, h))
    tower("text", cfg.tokens + 1)
    return params


def bind(params: dict[str, np.ndarray], tape: Optional[T.Tape]) -> dict[str, Tensor]:
    """Wrap raw parameter arrays as tensors, as tape leaves when training."""
    if tape is None:
        return {k: T.constant(v) for k, v in params.items()}
    return {k: tape.leaf(v) for k, v in params.items()}


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def _affine_ln(x: Tensor, g: Tensor, b: Tensor, lead: tuple[int, ...]) -> Tensor:
    y = T.layer_norm_last(x)
    y = T.mul(y, T.expand(g, lead))
    return T.add(y, T.expand(b, lead))


def _attention(x: Tensor, p: dict[str, Tensor], blk: str, heads: int) -> Tensor:
    r, t, h = x.shape
    dh = h // heads
    q = T.linear(x, p[f"{blk}.attn.wq"], p[f"{blk}.attn.bq"])
    k = T.linear(x, p[f"{blk}.attn.wk"], p[f"{blk}.attn.bk"])
    v = T.linear(x, p[f"{blk}.attn.wv"], p[f"{blk}.attn.bv"])

    def split(z):  # (r, t, h) -> (r, heads, t, dh)
        return T.transpose(T.reshape(z, (r, t, heads, dh)), (0, 2, 1, 3))

    q, k, v = split(q), split(k), split(v)
    scores = T.scalar_mul(T.bmm(q, T.transpose(k, (0, 1, 3, 2))), dh ** -0.5)
    attn = T.softmax_last(scores)
    ctx = T.bmm(attn, v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (r, t, h))
    return T.linear(ctx, p[f"{blk}.attn.wo"], p[f"{blk}.attn.bo"])


def _check_finite(x: Tensor, where: str) -> None:
    if not np.all(np.isfinite(x.data)):
        raise NumericFaultError(f"non-finite activations in {where}")


def _transformer(x: Tensor, p: dict[str, Tensor], prefix: str, cfg: EncoderConfig) -> Tensor:
    """Pre-LN transformer over (R, T, hidden)."""
    r, t, _ = x.shape
    lead = (r, t)
    for i in range(cfg.layers):
        blk = f"{prefix}.block{i}"
        a = _affine_ln(x, p[f"{blk}.ln1.g"], p[f"{blk}.ln1.b"], lead)
        x = T.add(x, _attention(a, p, blk, cfg.heads))
        a = _affine_ln(x, p[f"{blk}.ln2.g"], p[f"{blk}.ln2.b"], lead)
        a = T.linear(a, p[f"{blk}.mlp.w1"], p[f"{blk}.mlp.b1"])
        a = T.gelu(a)
        a = T.linear(a, p[f"{blk}.mlp.w2"], p[f"{blk}.mlp.b2"])
        x = T.add(x, a)
        _check_finite(x, f"{prefix} encoder block {i}")
    return _affine_ln(x, p[f"{prefix}.ln_f.g"], p[f"{prefix}.ln_f.b"], lead)


def _project_normalize(x: Tensor, proj: Tensor) -> tuple[Tensor, Tensor]:
    """(B, T, hidden) -> unit-norm (B, d) CLS and (B, T-1, d) locals."""
    b, t, _ = x.shape
    y = T.linear(x, proj)
    d = y.shape[-1]
    y = T.reshape(T.l2_normalize_rows(T.reshape(y, (b * t, d))), (b, t, d))
    cls = T.reshape(T.slice_axis(y, 1, 0, 1), (b, d))
    locs = T.slice_axis(y, 1, 1, t)
    return cls, locs


def encode_video_batch(frames: np.ndarray, p: dict[str, Tensor],
                       cfg: EncoderConfig) -> tuple[Tensor, Tensor]:
    """Encode (B, K, N, p) raw frames into CLS (B, d) and locals (B, N, d)."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4:
        raise ShapeError(f"expected (B, K, N, p) frames, got {frames.shape}")
    b, k, n, pd = frames.shape
    if (n, pd) != (cfg.patches, cfg.patch_dim):
        raise ShapeError(
            f"frames {frames.shape} disagree with config N={cfg.patches}, p={cfg.patch_dim}")

    x = T.linear(Tensor(frames), p["video.patch_embed.w"], p["video.patch_embed.b"])
    cls = T.expand(p["video.cls"], (b, k))          # (B, K, 1, h)
    x = T.concat([cls, x], axis=2)                  # (B, K, N+1, h)
    if cfg.use_positions:
        x = T.add(x, T.expand(p["video.pos"], (b, k)))
    x = T.reshape(x, (b * k, n + 1, cfg.hidden))
    x = _transformer(x, p, "video", cfg)
    x = T.reshape(x, (b, k, n + 1, cfg.hidden))
    x = T.mean_axis(x, axis=1)                      # position-wise pool over K frames
    return _project_normalize(x, p["video.proj"])


def encode_text_batch(token_ids: np.ndarray, p: dict[str, Tensor],
                      cfg: EncoderConfig) -> tuple[Tensor, Tensor]:
    """Encode (B, L) token ids into CLS (B, d) and locals (B, L, d)."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 2:
        raise ShapeError(f"expected (B, L) token ids, got {ids.shape}")
    if np.any(ids < 0) or np.any(ids >= cfg.vocab_size):
        raise ShapeError(f"token id out of range for vocab {cfg.vocab_size}")
    b, l = ids.shape
    if l > cfg.tokens:
        raise ShapeError(f"text length {l} exceeds configured maximum {cfg.tokens}")

    x = T.embedding(p["text.tok_embed"], ids)       # (B, L, h)
    cls = T.expand(p["text.cls"], (b,))             # (B, 1, h)
    x = T.concat([cls, x], axis=1)                  # (B, L+1, h)
    if cfg.use_positions:
        x = T.add(x, T.expand(T.slice_axis(p["text.pos"], 0, 0, l + 1), (b,)))
    x = _transformer(x, p, "text", cfg)
    return _project_normalize(x, p["text.proj"])


def encode_video(v: VideoInput, p: dict[str, Tensor], cfg: EncoderConfig) -> FeatureSet:
    """Single-pair video encoding (batch of one)."""
    n = v.frames.shape[1]
    cls, locs = encode_video_batch(v.frames[None], p, cfg)
    return FeatureSet(cls=T.reshape(cls, (cfg.proj_dim,)),
                      locals=T.reshape(locs, (n, cfg.proj_dim)))


def encode_text(t: TextInput, p: dict[str, Tensor], cfg: EncoderConfig) -> FeatureSet:
    """Single-pair text encoding (batch of one)."""
    l = t.token_ids.size
    cls, locs = encode_text_batch(t.token_ids[None], p, cfg)
    return FeatureSet(cls=T.reshape(cls, (cfg.proj_dim,)),
                      locals=T.reshape(locs, (l, cfg.proj_dim)))


# ---------------------------------------------------------------------------
# checkpoints: plain-text header of named shapes + little-endian f64 payload
# (full layout documented in docs/FORMATS.md)
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: dict[str, np.ndarray], meta: Optional[dict] = None) -> None:
    names = list(params.keys())
    header = [CHECKPOINT_MAGIC, "meta " + json.dumps(meta or {}, sort_keys=True),
              f"tensors {len(names)}"]
    header += [f"{name} {' '.join(str(e) for e in params[name].shape)}" for name in names]
    header.append("---")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        for name in names:
            f.write(np.ascontiguousarray(params[name], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise InputError(f"cannot read checkpoint {path}: {e}") from e
    sep = b"\n---\n"
    cut = raw.find(sep)
    if cut < 0:
        raise MalformedHeaderError(f"{path}: missing header terminator '---'")
    lines = raw[:cut].decode("ascii", errors="replace").split("\n")
    if lines[0] != CHECKPOINT_MAGIC:
        raise VersionMismatchError(f"{path}: expected '{CHECKPOINT_MAGIC}', found '{lines[0]}'")
    if len(lines) < 3 or not lines[1].startswith("meta ") or not lines[2].startswith("tensors "):
        raise MalformedHeaderError(f"{path}: malformed meta/tensors lines")
    try:
        meta = json.loads(lines[1][5:])
        count = int(lines[2].split()[1])
        specs = []
        for line in lines[3:3 + count]:
            parts = line.split()
            specs.append((parts[0], tuple(int(e) for e in parts[1:])))
        if len(specs) != count:
            raise IndexError
    except (ValueError, IndexError) as e:
        raise MalformedHeaderError(f"{path}: unparseable header: {e}") from e

    payload = raw[cut + len(sep):]
    expected = sum(int(np.prod(shape)) for _, shape in specs) * 8
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"{path}: expected {expected} payload bytes, found {len(payload)}")

    params: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in specs:
        nbytes = int(np.prod(shape)) * 8
        params[name] = np.frombuffer(
            payload[offset:offset + nbytes], dtype="<f8").reshape(shape).copy()
        offset += nbytes
    return params, meta


def config_to_json(cfg) -> str:
    return json.dumps(asdict(cfg), sort_keys=True)


def encoder_config_from_dict(d: dict) -> EncoderConfig:
    cfg = EncoderConfig(**d)
    cfg.validate()
    return cfg
