"""Synthetic paired video/caption corpora with planted redundancy.

Each pair is built around one main concept. The video renders that
concept on most patches and unrelated distractor concepts on a planted
fraction, repeated over frames with fresh noise. The caption mixes
tokens that name the main concept with planted redundant tokens naming
concepts absent from the video. Ground-truth masks record which patches
and tokens are aligned, so scoring quality can be measured directly.
Planted counts are exact: round(rate * count), capped so at least one
aligned element survives per side.

Concept identity is the only bridge between modalities: patch vectors
are a fixed linear rendering of per-concept latents, and token ids
enumerate (concept, slot) cells of the vocabulary. Main concepts cycle
through shuffled permutations of the concept range, so an index-based
split keeps every concept in training while later slices stay free of
repeats as long as a slice fits inside one cycle.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from .errors import (
    ConfigError,
    CorpusFormatError,
    InputError,
    MalformedHeaderError,
    TruncatedPayloadError,
    VersionMismatchError,
)

CORPUS_MAGIC = "redcon-corpus-v1"


@dataclass
class CorpusConfig:
    pairs: int = 2000
    frames: int = 4
    patches: int = 16
    patch_dim: int = 16
    tokens: int = 8
    concepts: int = 24
    token_slots: int = 4
    concept_dim: int = 8
    distractors: int = 2
    redundant_patch_rate: float = 0.5
    redundant_token_rate: float = 0.5
    noise_sigma: float = 0.5
    seed: int = 0

    @property
    def vocab_size(self) -> int:
        return self.concepts * self.token_slots

    def redundant_patch_count(self) -> int:
        # exact planted count; at least one aligned patch always survives
        return min(int(round(self.redundant_patch_rate * self.patches)),
                   self.patches - 1)

    def redundant_token_count(self) -> int:
        return min(int(round(self.redundant_token_rate * self.tokens)),
                   self.tokens - 1)

    def validate(self) -> None:
        for name in ("pairs", "frames", "patches", "patch_dim", "tokens",
                     "concepts", "token_slots", "concept_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.distractors < 0:
            raise ConfigError(f"distractors must be >= 0, got {self.distractors}")
        for name in ("redundant_patch_rate", "redundant_token_rate"):
            rate = getattr(self, name)
            if not 0.0 <= rate <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {rate}")
        if self.noise_sigma < 0.0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.redundant_patch_count() > 0 and self.distractors == 0:
            raise ConfigError(
                "planting redundant patches needs at least one distractor "
                "concept to render")
        if (self.distractors + 1 >= self.concepts
                and self.redundant_token_count() > 0):
            raise ConfigError(
                f"planting redundant tokens needs concepts absent from the "
                f"video: {self.concepts} concepts cannot cover 1 main + "
                f"{self.distractors} distractors + 1 spare")
        if self.distractors >= self.concepts:
            raise ConfigError(
                f"{self.distractors} distractors need at least "
                f"{self.distractors + 1} concepts, got {self.concepts}")


def corpus_config_from_dict(d: dict) -> CorpusConfig:
    known = {f: d[f] for f in CorpusConfig.__dataclass_fields__ if f in d}
    unknown = set(d) - set(CorpusConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown corpus config keys: {sorted(unknown)}")
    cfg = CorpusConfig(**known)
    cfg.validate()
    return cfg


@dataclass
class SyntheticPairRecord:
    index: int
    main_concept: int
    frames: np.ndarray         # (K, N, p) float64 patch features
    token_ids: np.ndarray      # (L,) int64
    patch_aligned: np.ndarray  # (N,) bool, True where the patch shows the main concept
    token_aligned: np.ndarray  # (L,) bool, False marks planted redundant tokens


@dataclass
class Corpus:
    config: CorpusConfig
    records: List[SyntheticPairRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int) -> SyntheticPairRecord:
        return self.records[i]

    def subset(self, indices: Sequence[int]) -> "Corpus":
        return Corpus(self.config, [self.records[i] for i in indices])


def split_indices(n: int, train_frac: float = 0.8,
                  val_frac: float = 0.1) -> Dict[str, List[int]]:
    """Deterministic index split; later slices never precede earlier ones."""
    if not (0.0 < train_frac < 1.0 and 0.0 < val_frac < 1.0
            and train_frac + val_frac < 1.0):
        raise ConfigError(
            f"split fractions must be positive and sum below 1, got "
            f"train={train_frac} val={val_frac}")
    t_end = int(n * train_frac)
    v_end = int(n * (train_frac + val_frac))
    return {
        "train": list(range(0, t_end)),
        "val": list(range(t_end, v_end)),
        "test": list(range(v_end, n)),
    }


def _main_concepts(cfg: CorpusConfig) -> np.ndarray:
    # shuffled full cycles, so any contiguous slice shorter than one cycle
    # holds distinct concepts while training still sees all of them
    rng = np.random.default_rng([cfg.seed, 2])
    cycles = -(-cfg.pairs // cfg.concepts)
    ordering = np.concatenate([rng.permutation(cfg.concepts) for _ in range(cycles)])
    return ordering[:cfg.pairs]


def generate_corpus(cfg: CorpusConfig) -> Corpus:
    cfg.validate()
    render_rng = np.random.default_rng([cfg.seed, 1])
    latents = render_rng.normal(size=(cfg.concepts, cfg.concept_dim))
    renderer = render_rng.normal(
        scale=1.0 / np.sqrt(cfg.concept_dim),
        size=(cfg.patch_dim, cfg.concept_dim))
    mains = _main_concepts(cfg)

    red_patch_count = cfg.redundant_patch_count()
    red_token_count = cfg.redundant_token_count()
    aligned_count = cfg.tokens - red_token_count

    records = []
    for i in range(cfg.pairs):
        rng = np.random.default_rng([cfg.seed, 0, i])
        main = int(mains[i])

        others = rng.choice(cfg.concepts - 1, size=cfg.distractors, replace=False)
        others = np.where(others >= main, others + 1, others)

        patch_concepts = np.full(cfg.patches, main, dtype=np.int64)
        red_slots = rng.permutation(cfg.patches)[:red_patch_count]
        if red_patch_count:
            patch_concepts[red_slots] = rng.choice(others, size=red_patch_count)
        patch_aligned = patch_concepts == main

        base = latents[patch_concepts] @ renderer.T     # (N, p)
        frames = np.stack([
            base + cfg.noise_sigma * rng.normal(size=base.shape)
            for _ in range(cfg.frames)
        ])

        slots = rng.choice(cfg.token_slots, size=aligned_count,
                           replace=aligned_count > cfg.token_slots)
        aligned_ids = main * cfg.token_slots + slots
        if red_token_count:
            absent = np.setdiff1d(np.arange(cfg.concepts),
                                  np.concatenate([[main], others]))
            chosen = rng.choice(absent, size=red_token_count,
                                replace=red_token_count > absent.size)
            red_ids = chosen * cfg.token_slots + rng.integers(
                cfg.token_slots, size=red_token_count)
        else:
            red_ids = np.empty(0, dtype=np.int64)

        token_ids = np.concatenate([aligned_ids, red_ids]).astype(np.int64)
        token_aligned = np.concatenate([
            np.ones(aligned_count, dtype=bool),
            np.zeros(red_token_count, dtype=bool),
        ])
        order = rng.permutation(cfg.tokens)
        records.append(SyntheticPairRecord(
            index=i,
            main_concept=main,
            frames=frames,
            token_ids=token_ids[order],
            patch_aligned=patch_aligned,
            token_aligned=token_aligned[order],
        ))
    return Corpus(cfg, records)


@dataclass
class BatchArrays:
    """Records stacked into rectangular arrays for encoding."""

    frames: np.ndarray         # (B, K, N, p)
    token_ids: np.ndarray      # (B, L)
    patch_aligned: np.ndarray  # (B, N)
    token_aligned: np.ndarray  # (B, L)
    indices: np.ndarray        # (B,)


def stack_records(records: Sequence[SyntheticPairRecord]) -> BatchArrays:
    if not records:
        raise ConfigError("cannot stack an empty record list")
    return BatchArrays(
        frames=np.stack([r.frames for r in records]),
        token_ids=np.stack([r.token_ids for r in records]),
        patch_aligned=np.stack([r.patch_aligned for r in records]),
        token_aligned=np.stack([r.token_aligned for r in records]),
        indices=np.array([r.index for r in records], dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# on-disk format: header lines, then one contiguous little-endian payload
# ---------------------------------------------------------------------------

_ARRAY_FIELDS = (
    ("frames", "<f8"),
    ("token_ids", "<i8"),
    ("patch_aligned", "u1"),
    ("token_aligned", "u1"),
    ("main_concept", "<i8"),
)


def save_corpus(path, corpus: Corpus) -> None:
    cfg = corpus.config
    stacked = {
        "frames": np.stack([r.frames for r in corpus.records]),
        "token_ids": np.stack([r.token_ids for r in corpus.records]),
        "patch_aligned": np.stack([r.patch_aligned for r in corpus.records]),
        "token_aligned": np.stack([r.token_aligned for r in corpus.records]),
        "main_concept": np.array([r.main_concept for r in corpus.records]),
    }
    meta = asdict(cfg)
    meta["pairs"] = len(corpus.records)  # subsets stay self-consistent
    lines = [CORPUS_MAGIC, "meta " + json.dumps(meta, sort_keys=True),
             f"arrays {len(_ARRAY_FIELDS)}"]
    payload = []
    for name, dtype in _ARRAY_FIELDS:
        arr = np.ascontiguousarray(stacked[name].astype(dtype))
        lines.append(f"{name} {dtype} " + " ".join(str(s) for s in arr.shape))
        payload.append(arr.tobytes())
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n---\n").encode("ascii"))
        for chunk in payload:
            f.write(chunk)


def load_corpus(path) -> Corpus:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise InputError(f"cannot read corpus {path}: {e}") from e
    sep = b"\n---\n"
    cut = raw.find(sep)
    if cut < 0:
        raise MalformedHeaderError(f"{path}: missing header/payload separator")
    header = raw[:cut].decode("ascii", errors="replace").splitlines()
    payload = raw[cut + len(sep):]

    if not header or header[0] != CORPUS_MAGIC:
        found = header[0] if header else "<empty>"
        raise VersionMismatchError(
            f"{path}: expected magic {CORPUS_MAGIC!r}, found {found!r}")
    if len(header) < 3 or not header[1].startswith("meta "):
        raise MalformedHeaderError(f"{path}: missing meta line")
    try:
        meta = json.loads(header[1][len("meta "):])
    except json.JSONDecodeError as e:
        raise MalformedHeaderError(f"{path}: unparseable meta line: {e}") from e
    parts = header[2].split()
    if len(parts) != 2 or parts[0] != "arrays" or not parts[1].isdigit():
        raise MalformedHeaderError(f"{path}: bad array-count line {header[2]!r}")
    count = int(parts[1])
    if len(header) != 3 + count:
        raise MalformedHeaderError(
            f"{path}: header declares {count} arrays but has "
            f"{len(header) - 3} descriptor lines")

    specs = []
    for line in header[3:]:
        bits = line.split()
        if len(bits) < 3:
            raise MalformedHeaderError(f"{path}: bad array descriptor {line!r}")
        name, dtype, dims = bits[0], bits[1], bits[2:]
        if not all(d.isdigit() for d in dims):
            raise MalformedHeaderError(f"{path}: non-numeric shape in {line!r}")
        specs.append((name, np.dtype(dtype), tuple(int(d) for d in dims)))

    expected = sum(dt.itemsize * int(np.prod(shape)) for _, dt, shape in specs)
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"{path}: expected {expected} payload bytes, found {len(payload)}")
    if len(payload) > expected:
        raise CorpusFormatError(
            f"{path}: {len(payload) - expected} trailing bytes after payload")

    arrays, offset = {}, 0
    for name, dt, shape in specs:
        nbytes = dt.itemsize * int(np.prod(shape))
        arrays[name] = np.frombuffer(
            payload, dtype=dt, count=int(np.prod(shape)), offset=offset,
        ).reshape(shape).copy()
        offset += nbytes

    cfg = corpus_config_from_dict(meta)
    missing = [n for n, _ in _ARRAY_FIELDS if n not in arrays]
    if missing:
        raise MalformedHeaderError(f"{path}: missing arrays {missing}")
    n = arrays["frames"].shape[0]
    records = [
        SyntheticPairRecord(
            index=i,
            main_concept=int(arrays["main_concept"][i]),
            frames=arrays["frames"][i],
            token_ids=arrays["token_ids"][i],
            patch_aligned=arrays["patch_aligned"][i].astype(bool),
            token_aligned=arrays["token_aligned"][i].astype(bool),
        )
        for i in range(n)
    ]
    return Corpus(cfg, records)
