"""Zero-shot retrieval evaluation, redundancy reports, and ablations.

Retrieval treats every evaluated pair as both a query and a gallery
item: videos retrieve captions by CLS similarity and vice versa. Ranks
break ties toward the lower gallery index, matching a stable descending
sort, so metrics are deterministic.

Redundancy reports compare predicted per-position scores against the
ground-truth masks a synthetic corpus carries, summarizing how far apart
the planted-redundant and aligned populations sit.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .datasynth import SyntheticPairRecord, stack_records
from .encoders import EncoderConfig, bind, encode_text_batch, encode_video_batch
from .errors import ConfigError, InputError
from .redundancy import DEFAULT_FLOOR, batch_redundancy
from .trainer import TrainConfig, run_training


# ---------------------------------------------------------------------------
# retrieval
# ---------------------------------------------------------------------------

@dataclass
class RetrievalMetrics:
    r1: float    # percent of queries whose match ranks first
    r5: float
    r10: float
    mdr: float   # median rank of the match
    queries: int

    def as_dict(self) -> dict:
        return asdict(self)


def retrieval_ranks(scores: np.ndarray, truth: Optional[np.ndarray] = None) -> np.ndarray:
    """Rank of each query's true gallery item under descending score.

    `truth[q]` names the gallery column holding query q's match; by
    default query q matches column q. A tied score counts against the
    query only when the tying item sits at a lower index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise InputError(f"scores must be (queries, gallery), got {scores.shape}")
    q, g = scores.shape
    if truth is None:
        if q != g:
            raise InputError(
                f"identity ground truth needs a square matrix, got {scores.shape}")
        truth = np.arange(q)
    truth = np.asarray(truth)
    if truth.shape != (q,):
        raise InputError(f"truth must have shape ({q},), got {truth.shape}")
    if truth.min() < 0 or truth.max() >= g:
        raise InputError(
            f"truth indices must lie in [0, {g}), got range "
            f"[{truth.min()}, {truth.max()}]")

    ranks = np.empty(q, dtype=np.int64)
    for i in range(q):
        s = scores[i]
        target = s[truth[i]]
        ahead = int((s > target).sum()) + int((s[:truth[i]] == target).sum())
        ranks[i] = 1 + ahead
    return ranks


def retrieval_metrics(scores: np.ndarray,
                      truth: Optional[np.ndarray] = None) -> RetrievalMetrics:
    ranks = retrieval_ranks(scores, truth)
    return RetrievalMetrics(
        r1=float(100.0 * np.mean(ranks <= 1)),
        r5=float(100.0 * np.mean(ranks <= 5)),
        r10=float(100.0 * np.mean(ranks <= 10)),
        mdr=float(np.median(ranks)),
        queries=int(ranks.size),
    )


# ---------------------------------------------------------------------------
# corpus encoding (inference only, chunked)
# ---------------------------------------------------------------------------

@dataclass
class EncodedCorpus:
    video_cls: np.ndarray     # (B, d)
    video_locals: np.ndarray  # (B, N, d)
    text_cls: np.ndarray      # (B, d)
    text_locals: np.ndarray   # (B, L, d)


def encode_corpus(
    params: Dict[str, np.ndarray],
    enc_cfg: EncoderConfig,
    records: Sequence[SyntheticPairRecord],
    *,
    frames_used: Optional[int] = None,
    chunk: int = 32,
) -> EncodedCorpus:
    if not records:
        raise InputError("no records to encode")
    bound = bind(params, None)
    vc, vl, tc, tl = [], [], [], []
    for start in range(0, len(records), chunk):
        batch = stack_records(records[start:start + chunk])
        frames = batch.frames
        if frames_used is not None:
            if frames_used > frames.shape[1]:
                raise ConfigError(
                    f"frames_used={frames_used} exceeds the {frames.shape[1]} "
                    f"stored frames")
            frames = frames[:, :frames_used]
        v_cls, v_loc = encode_video_batch(frames, bound, enc_cfg)
        t_cls, t_loc = encode_text_batch(batch.token_ids, bound, enc_cfg)
        vc.append(v_cls.data)
        vl.append(v_loc.data)
        tc.append(t_cls.data)
        tl.append(t_loc.data)
    return EncodedCorpus(np.concatenate(vc), np.concatenate(vl),
                         np.concatenate(tc), np.concatenate(tl))


@dataclass
class EvalReport:
    v2t: RetrievalMetrics
    t2v: RetrievalMetrics
    pairs: int

    def as_dict(self) -> dict:
        return {"v2t": self.v2t.as_dict(), "t2v": self.t2v.as_dict(),
                "pairs": self.pairs}


def evaluate_zero_shot(
    params: Dict[str, np.ndarray],
    enc_cfg: EncoderConfig,
    records: Sequence[SyntheticPairRecord],
    *,
    frames_used: Optional[int] = None,
) -> EvalReport:
    """Pair-identity retrieval over `records` in both directions."""
    enc = encode_corpus(params, enc_cfg, records, frames_used=frames_used)
    scores = enc.video_cls @ enc.text_cls.T
    return EvalReport(
        v2t=retrieval_metrics(scores),
        t2v=retrieval_metrics(scores.T),
        pairs=len(records),
    )


# ---------------------------------------------------------------------------
# redundancy reporting
# ---------------------------------------------------------------------------

def _mean_or_nan(values: np.ndarray) -> float:
    return float(values.mean()) if values.size else float("nan")


@dataclass
class RedundancyReport:
    token_scores: np.ndarray       # (B, L)
    patch_scores: np.ndarray       # (B, N)
    token_weights: np.ndarray      # (B, L)
    patch_weights: np.ndarray      # (B, N)
    token_aligned: np.ndarray      # (B, L) ground truth
    patch_aligned: np.ndarray      # (B, N)
    dissimilarity: np.ndarray      # (B, N, L)
    token_argmin: Optional[List[List[int]]] = None  # matched patch per token
    patch_argmin: Optional[List[List[int]]] = None  # matched token per patch

    def token_separation(self) -> float:
        """Mean score of planted-redundant tokens minus aligned tokens."""
        return (_mean_or_nan(self.token_scores[~self.token_aligned])
                - _mean_or_nan(self.token_scores[self.token_aligned]))

    def patch_separation(self) -> float:
        return (_mean_or_nan(self.patch_scores[~self.patch_aligned])
                - _mean_or_nan(self.patch_scores[self.patch_aligned]))

    def summary(self) -> dict:
        return {
            "pairs": int(self.token_scores.shape[0]),
            "token_separation": self.token_separation(),
            "patch_separation": self.patch_separation(),
            "mean_token_score_redundant": _mean_or_nan(
                self.token_scores[~self.token_aligned]),
            "mean_token_score_aligned": _mean_or_nan(
                self.token_scores[self.token_aligned]),
            "mean_patch_score_redundant": _mean_or_nan(
                self.patch_scores[~self.patch_aligned]),
            "mean_patch_score_aligned": _mean_or_nan(
                self.patch_scores[self.patch_aligned]),
        }


def redundancy_report(
    params: Dict[str, np.ndarray],
    enc_cfg: EncoderConfig,
    records: Sequence[SyntheticPairRecord],
    *,
    frames_used: Optional[int] = None,
    floor: float = DEFAULT_FLOOR,
) -> RedundancyReport:
    enc = encode_corpus(params, enc_cfg, records, frames_used=frames_used)
    batch = batch_redundancy(T.constant(enc.video_locals), T.constant(enc.text_locals),
                             floor=floor, stop_grad=True)
    stacked = stack_records(records)
    return RedundancyReport(
        token_scores=batch.token_scores,
        patch_scores=batch.patch_scores,
        token_weights=batch.token_weights.data,
        patch_weights=batch.patch_weights.data,
        token_aligned=stacked.token_aligned,
        patch_aligned=stacked.patch_aligned,
        dissimilarity=batch.dissimilarity,
        token_argmin=batch.token_argmin,
        patch_argmin=batch.patch_argmin,
    )


# ---------------------------------------------------------------------------
# heatmap export: ASCII PGM plus a JSON sidecar for exact rescaling
# ---------------------------------------------------------------------------

PGM_LEVELS = 255


def near_square_grid(n: int) -> tuple[int, int]:
    """Divisor pair (rows, cols) of n with rows <= cols, closest to square."""
    if n < 1:
        raise InputError(f"cannot grid {n} values")
    best = (1, n)
    for r in range(1, int(np.sqrt(n)) + 1):
        if n % r == 0:
            best = (r, n // r)
    return best


def write_heatmap(path, values: np.ndarray, label: str = "") -> None:
    """Write a 2-D array as ASCII PGM with a `.json` sidecar.

    The sidecar records the value range so the quantized levels can be
    mapped back to data units. Vectors are reshaped to the nearest
    rectangular grid first.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values.reshape(near_square_grid(values.size))
    if values.ndim != 2 or values.size == 0:
        raise InputError(f"heatmap needs a non-empty vector or matrix, "
                         f"got shape {values.shape}")
    vmin, vmax = float(values.min()), float(values.max())
    span = vmax - vmin
    if span > 0.0:
        levels = np.rint((values - vmin) / span * PGM_LEVELS).astype(np.int64)
    else:
        levels = np.zeros_like(values, dtype=np.int64)

    path = Path(path)
    rows, cols = values.shape
    body = "\n".join(" ".join(str(v) for v in row) for row in levels)
    path.write_text(f"P2\n{cols} {rows}\n{PGM_LEVELS}\n{body}\n")
    sidecar = {
        "rows": rows, "cols": cols, "min": vmin, "max": vmax,
        "levels": PGM_LEVELS, "label": label,
    }
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, sort_keys=True) + "\n")


def read_heatmap(path) -> tuple[np.ndarray, dict]:
    """Load a PGM written by write_heatmap, restoring approximate values."""
    path = Path(path)
    tokens = path.read_text().split()
    if not tokens or tokens[0] != "P2":
        raise InputError(f"{path}: not an ASCII PGM file")
    if len(tokens) < 4:
        raise InputError(f"{path}: truncated PGM header")
    cols, rows, maxval = (int(t) for t in tokens[1:4])
    data = np.array([int(t) for t in tokens[4:]], dtype=np.float64)
    if data.size != rows * cols:
        raise InputError(
            f"{path}: expected {rows * cols} samples, found {data.size}")
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    lo, hi = sidecar["min"], sidecar["max"]
    values = lo + data.reshape(rows, cols) / maxval * (hi - lo)
    return values, sidecar


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

ABLATION_AXES = {
    "direction": ("off", "v2t", "t2v", "both"),
    "lam": (0.0, 0.5, 1.0, 2.0, 4.0),
    "frames": (1, 2, 4, 8),
}


def run_ablation(
    train_records: Sequence[SyntheticPairRecord],
    test_records: Sequence[SyntheticPairRecord],
    enc_cfg: EncoderConfig,
    tcfg: TrainConfig,
    out_dir,
    axis: str,
    values: Optional[Sequence] = None,
) -> List[dict]:
    """Sweep one config axis, retraining from scratch per setting.

    Writes each run under `out_dir/<axis>_<value>/` and a combined
    `ablation_<axis>.tsv` table; returns the table rows as dicts.
    """
    if axis not in ABLATION_AXES:
        raise ConfigError(f"axis must be one of {sorted(ABLATION_AXES)}, got {axis!r}")
    values = list(ABLATION_AXES[axis] if values is None else values)
    if not values:
        raise ConfigError("ablation needs at least one value")
    if axis == "frames" and train_records:
        # fail before any training, not hours in at the oversized row
        available = train_records[0].frames.shape[0]
        excess = [v for v in values if int(v) > available]
        if excess:
            raise ConfigError(
                f"frames axis value {max(int(v) for v in excess)} exceeds the "
                f"corpus's {available} frames; pass explicit values or "
                f"regenerate the corpus with more frames")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in values:
        if axis == "direction":
            variant = replace(tcfg, direction=str(value))
        elif axis == "lam":
            variant = replace(tcfg, lam=float(value))
        else:
            variant = replace(tcfg, frames_used=int(value))
        run_dir = out_dir / f"{axis}_{value}"
        started = time.monotonic()
        result = run_training(train_records, enc_cfg, variant, run_dir)
        train_s = time.monotonic() - started
        frames_used = variant.frames_used
        report = evaluate_zero_shot(result.params, enc_cfg, test_records,
                                    frames_used=frames_used)
        red = redundancy_report(result.params, enc_cfg, test_records,
                                frames_used=frames_used)
        row = {"axis": axis, "value": value, "steps": result.steps,
               "train_s": round(train_s, 3)}
        for direction, metrics in (("v2t", report.v2t), ("t2v", report.t2v)):
            for field in ("r1", "r5", "r10", "mdr"):
                row[f"{direction}_{field}"] = getattr(metrics, field)
        row["token_separation"] = red.token_separation()
        row["patch_separation"] = red.patch_separation()
        rows.append(row)

    table = out_dir / f"ablation_{axis}.tsv"
    header = list(rows[0].keys())
    lines = ["\t".join(header)]
    for row in rows:
        lines.append("\t".join(_fmt(row[k]) for k in header))
    table.write_text("\n".join(lines) + "\n")
    return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)
