"""Cross-modal redundancy scoring over local features.

A video patch that no caption token comes close to describing carries no
alignment signal for that pair, and a caption token that restates nothing
visible is equally inert. Both cases are detected with one primitive: the
minimum dissimilarity between a local feature and every local feature on
the other side. Scores near zero mark tightly matched positions; scores
near one (or above, for anti-aligned features) mark redundant ones. Loss
weights invert the score, `w = clamp(1 - r, 0, 1)`, so redundant positions
are suppressed and matched ones kept.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from . import tensor as T
from .errors import ContractViolation, ShapeError

NORM_TOL = 1e-6
SCORE_TOL = 1e-6
DEFAULT_FLOOR = 1e-6


def _check_unit_rows(x: T.Tensor, side: str) -> None:
    norms = np.linalg.norm(x.data, axis=-1)
    off = np.abs(norms - 1.0)
    if off.max() > NORM_TOL:
        i = int(off.argmax())
        raise ContractViolation(
            f"{side} row {i} has norm {norms[i]:.9f}; expected unit-length rows")


def dissimilarity_matrix(video_locals: T.Tensor, text_locals: T.Tensor) -> T.Tensor:
    """One minus the dot product for every (patch, token) pair.

    Both inputs must be matrices of L2-normalized rows sharing a feature
    width, so every entry lands in [0, 2].
    """
    if video_locals.data.ndim != 2 or text_locals.data.ndim != 2:
        raise ShapeError(
            f"dissimilarity needs matrices, got {video_locals.data.shape} "
            f"and {text_locals.data.shape}")
    if video_locals.data.shape[1] != text_locals.data.shape[1]:
        raise ShapeError(
            f"feature widths differ: video {video_locals.data.shape[1]} "
            f"vs text {text_locals.data.shape[1]}")
    _check_unit_rows(video_locals, "video locals")
    _check_unit_rows(text_locals, "text locals")
    sim = T.matmul(video_locals, T.transpose(text_locals))
    return T.scalar_add(T.scalar_mul(sim, -1.0), 1.0)


@dataclass
class RedundancyScores:
    """Min-dissimilarity per position, with the matched counterpart index."""

    patch: T.Tensor            # (N,) one score per video patch
    token: T.Tensor            # (L,) one score per caption token
    patch_argmin: List[int]    # token index realizing each patch minimum
    token_argmin: List[int]    # patch index realizing each token minimum
    dissimilarity: T.Tensor    # (N, L) full matrix, kept for inspection


def scores_from_matrix(m: T.Tensor) -> RedundancyScores:
    patch, patch_arg = T.row_min(m)
    token, token_arg = T.row_min(T.transpose(m))
    return RedundancyScores(patch, token, patch_arg, token_arg, m)


def redundancy_scores(video_locals: T.Tensor, text_locals: T.Tensor) -> RedundancyScores:
    return scores_from_matrix(dissimilarity_matrix(video_locals, text_locals))


def redundancy_weights(scores: T.Tensor, *, floor: float = DEFAULT_FLOOR) -> T.Tensor:
    """Map scores to loss weights via `clamp(1 - r, 0, 1)`.

    Scores must sit in [0, 2] (up to tolerance). If every weight clamps to
    zero the whole vector is lifted to `floor`, keeping downstream weighted
    sums away from log(0).
    """
    data = scores.data
    if data.min() < -SCORE_TOL or data.max() > 2.0 + SCORE_TOL:
        raise ContractViolation(
            f"redundancy scores outside [0, 2]: min {data.min():.9f}, "
            f"max {data.max():.9f}")
    w = T.clamp(T.scalar_add(T.scalar_mul(scores, -1.0), 1.0), 0.0, 1.0)
    if floor > 0.0 and not np.any(w.data > 0.0):
        w = T.scalar_add(w, float(floor))
    return w


@dataclass
class PairRedundancy:
    """Scores plus ready-to-use weights for one video/caption pair."""

    scores: RedundancyScores
    patch_weights: T.Tensor    # (N,) weights for video patches
    token_weights: T.Tensor    # (L,) weights for caption tokens


@dataclass
class BatchRedundancy:
    """Per-pair weights stacked for a whole batch, plus plain-array scores."""

    patch_weights: T.Tensor        # (B, N)
    token_weights: T.Tensor        # (B, L)
    patch_scores: np.ndarray       # (B, N)
    token_scores: np.ndarray       # (B, L)
    patch_argmin: List[List[int]]
    token_argmin: List[List[int]]
    dissimilarity: np.ndarray      # (B, N, L)


def pair_redundancy(
    video_locals: T.Tensor,
    text_locals: T.Tensor,
    *,
    floor: float = DEFAULT_FLOOR,
    stop_grad: bool = True,
) -> PairRedundancy:
    """Score one pair and derive both weight vectors.

    With `stop_grad` (the default) the weights are treated as fixed
    coefficients: the loss gradient flows through the weighted terms but
    not through the weighting itself.
    """
    scores = redundancy_scores(video_locals, text_locals)
    pw = redundancy_weights(scores.patch, floor=floor)
    tw = redundancy_weights(scores.token, floor=floor)
    if stop_grad:
        pw = T.stop_gradient(pw)
        tw = T.stop_gradient(tw)
    return PairRedundancy(scores, pw, tw)


def batch_redundancy(
    video_locals: T.Tensor,
    text_locals: T.Tensor,
    *,
    floor: float = DEFAULT_FLOOR,
    stop_grad: bool = True,
) -> BatchRedundancy:
    """Score every pair in a batch of (B, N, d) patches and (B, L, d) tokens.

    Pairs are scored independently; redundancy is always a within-pair
    notion, never across the batch.
    """
    if video_locals.data.ndim != 3 or text_locals.data.ndim != 3:
        raise ShapeError(
            f"batch redundancy needs (B, N, d) and (B, L, d), got "
            f"{video_locals.data.shape} and {text_locals.data.shape}")
    if video_locals.data.shape[0] != text_locals.data.shape[0]:
        raise ShapeError(
            f"batch sizes differ: {video_locals.data.shape[0]} videos vs "
            f"{text_locals.data.shape[0]} captions")
    b, n, _ = video_locals.data.shape
    l = text_locals.data.shape[1]

    pw_rows, tw_rows = [], []
    ps, ts, pa, ta, mats = [], [], [], [], []
    for i in range(b):
        vi = T.reshape(T.slice_axis(video_locals, 0, i, i + 1), (n, video_locals.data.shape[2]))
        ti = T.reshape(T.slice_axis(text_locals, 0, i, i + 1), (l, text_locals.data.shape[2]))
        pr = pair_redundancy(vi, ti, floor=floor, stop_grad=stop_grad)
        pw_rows.append(T.reshape(pr.patch_weights, (1, n)))
        tw_rows.append(T.reshape(pr.token_weights, (1, l)))
        ps.append(pr.scores.patch.data)
        ts.append(pr.scores.token.data)
        pa.append(pr.scores.patch_argmin)
        ta.append(pr.scores.token_argmin)
        mats.append(pr.scores.dissimilarity.data)
    return BatchRedundancy(
        patch_weights=T.concat(pw_rows, axis=0),
        token_weights=T.concat(tw_rows, axis=0),
        patch_scores=np.stack(ps),
        token_scores=np.stack(ts),
        patch_argmin=pa,
        token_argmin=ta,
        dissimilarity=np.stack(mats),
    )
