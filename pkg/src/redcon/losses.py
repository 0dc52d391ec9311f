"""Contrastive training objectives.

Two families share one batch of encoded pairs:

* a symmetric global loss over CLS features, where each video competes
  against every caption in the batch and vice versa;
* a weighted multi-positive loss, where a CLS feature from one side is
  pulled toward its own pair's local features on the other side, each
  local weighted by how non-redundant it is, while all locals from every
  pair in the batch form the competition.

The weighted numerator sums `w_l * exp(sim / tau)` over the matched
pair's locals only; the denominator sums plain `exp(sim / tau)` over the
locals of every pair, unweighted. That asymmetry is deliberate: weights
shape what counts as a positive, not what counts as competition.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import tensor as T
from . import redundancy as R
from .errors import ConfigError, ContractViolation, DegenerateInputError, ShapeError

DIRECTIONS = ("both", "v2t", "t2v", "off")

# a float is a fixed temperature; a (1,) tensor is a trainable
# log-temperature whose gradient flows through the losses
Temperature = Union[float, T.Tensor]


@dataclass
class BatchFeatures:
    """Encoded batch: CLS plus local features for both sides."""

    video_cls: T.Tensor      # (B, d)
    video_locals: T.Tensor   # (B, N, d)
    text_cls: T.Tensor       # (B, d)
    text_locals: T.Tensor    # (B, L, d)

    def __post_init__(self):
        b = self.video_cls.data.shape[0]
        for name in ("video_cls", "video_locals", "text_cls", "text_locals"):
            t = getattr(self, name)
            if t.data.shape[0] != b:
                raise ShapeError(
                    f"{name} batch size {t.data.shape[0]} does not match {b}")
        if b == 0:
            raise DegenerateInputError("empty batch")

    @property
    def batch_size(self) -> int:
        return self.video_cls.data.shape[0]


@dataclass
class LossBreakdown:
    """Every term of the objective; skipped terms are None."""

    global_v2t: T.Tensor
    global_t2v: T.Tensor
    weighted_v2t: Optional[T.Tensor]
    weighted_t2v: Optional[T.Tensor]
    total: T.Tensor
    aux: Optional[T.Tensor] = None

    def as_floats(self) -> dict:
        def val(t):
            return float(t.data) if t is not None else 0.0

        return {
            "global_v2t": val(self.global_v2t),
            "global_t2v": val(self.global_t2v),
            "global_sum": val(self.global_v2t) + val(self.global_t2v),
            "weighted_v2t": val(self.weighted_v2t),
            "weighted_t2v": val(self.weighted_t2v),
            "weighted_sum": val(self.weighted_v2t) + val(self.weighted_t2v),
            "aux": val(self.aux),
            "total": val(self.total),
        }


def _scale_by_temperature(sims: T.Tensor, temperature: Temperature) -> T.Tensor:
    """Divide similarities by the temperature, differentiably if learnable."""
    if isinstance(temperature, T.Tensor):
        if temperature.data.shape != (1,):
            raise ShapeError(
                f"learnable log-temperature must have shape (1,), got "
                f"{temperature.data.shape}")
        inv = T.exp(T.scalar_mul(temperature, -1.0))       # (1,) holding 1/tau
        shape = sims.data.shape
        n = int(np.prod(shape))
        flat = T.mul(T.reshape(sims, (n, 1)), T.expand(inv, (n,)))
        return T.reshape(flat, shape)
    temperature = float(temperature)
    if not temperature > 0.0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    return T.scalar_mul(sims, 1.0 / temperature)


def contrastive_pair(video_cls: T.Tensor, text_cls: T.Tensor,
                     temperature: Temperature) -> tuple[T.Tensor, T.Tensor]:
    """Batch-global InfoNCE in both directions over CLS features.

    Row i of the (B, B) score matrix treats pair i as the positive and the
    other B-1 entries as negatives; the transpose gives the other
    direction. Returns (video-to-text, text-to-video) scalar losses.
    """
    if video_cls.data.shape != text_cls.data.shape or video_cls.data.ndim != 2:
        raise ShapeError(
            f"CLS features must be matching (B, d) matrices, got "
            f"{video_cls.data.shape} and {text_cls.data.shape}")
    b = video_cls.data.shape[0]
    if b == 0:
        raise DegenerateInputError("empty batch")
    logits = _scale_by_temperature(
        T.matmul(video_cls, T.transpose(text_cls)), temperature)
    mask = T.constant(np.eye(b))

    def nce(lg):
        diag = T.sum_axis(T.mul(T.log(T.softmax_last(lg)), mask))
        return T.scalar_mul(diag, -1.0 / b)

    return nce(logits), nce(T.transpose(logits))


def _weighted_infonce(anchors: T.Tensor, locals_: T.Tensor, weights: T.Tensor,
                      temperature: Temperature) -> T.Tensor:
    """Multi-positive InfoNCE of (B, d) anchors against (B, L, d) locals.

    Positives are the anchor's own row of locals, weighted entrywise; the
    denominator pools the locals of the whole batch.
    """
    b, d = anchors.data.shape
    if locals_.data.ndim != 3 or locals_.data.shape[0] != b or locals_.data.shape[2] != d:
        raise ShapeError(
            f"locals must be (B, L, {d}) for anchors {anchors.data.shape}, "
            f"got {locals_.data.shape}")
    l = locals_.data.shape[1]
    if weights.data.shape != (b, l):
        raise ShapeError(
            f"weights must be ({b}, {l}), got {weights.data.shape}")
    if np.any(weights.data < 0.0):
        raise ContractViolation("weights must be non-negative")
    row_mass = np.asarray(weights.data).sum(axis=1)
    if np.any(row_mass <= 0.0):
        i = int(np.argmax(row_mass <= 0.0))
        raise DegenerateInputError(
            f"pair {i} has all-zero weights; enable the weight floor")

    # numerator: each anchor against its own pair's locals
    own = T.bmm(T.reshape(anchors, (b, 1, d)), T.transpose(locals_, (0, 2, 1)))
    e_own = T.exp(_scale_by_temperature(own, temperature))
    num = T.reshape(T.sum_axis(T.mul(e_own, T.reshape(weights, (b, 1, l))), axis=2), (b,))
    # denominator: each anchor against every pair's locals, unweighted
    all_sims = T.matmul(anchors, T.transpose(T.reshape(locals_, (b * l, d))))
    den = T.sum_axis(T.exp(_scale_by_temperature(all_sims, temperature)), axis=1)
    return T.mean_axis(T.subtract(T.log(den), T.log(num)))


def weighted_v2t(video_cls: T.Tensor, text_locals: T.Tensor,
                 token_weights: T.Tensor, temperature: Temperature) -> T.Tensor:
    """Video CLS against caption tokens, redundant tokens down-weighted."""
    return _weighted_infonce(video_cls, text_locals, token_weights, temperature)


def weighted_t2v(text_cls: T.Tensor, video_locals: T.Tensor,
                 patch_weights: T.Tensor, temperature: Temperature) -> T.Tensor:
    """Text CLS against video patches, redundant patches down-weighted."""
    return _weighted_infonce(text_cls, video_locals, patch_weights, temperature)


def total_loss(
    batch: BatchFeatures,
    *,
    temperature: Temperature,
    lam: float = 1.0,
    direction: str = "both",
    weight_floor: float = R.DEFAULT_FLOOR,
    stop_weight_grad: bool = True,
    include_global: bool = True,
    weights: Optional[R.BatchRedundancy] = None,
    aux: Optional[T.Tensor] = None,
) -> LossBreakdown:
    """Combine the global terms with `lam` times the weighted terms.

    `direction` selects which weighted terms run; "off" (or lam == 0)
    skips the weighted machinery entirely rather than multiplying it by
    zero, so disabling it leaves the rest of the computation untouched.
    Precomputed `weights` may be passed to reuse redundancy scores. An
    `aux` scalar (a caller-supplied extra objective) is added into the
    total unscaled, outside the lam factor.
    """
    lam = float(lam)
    if lam < 0.0:
        raise ConfigError(f"weighted-loss scale must be >= 0, got {lam}")
    if direction not in DIRECTIONS:
        raise ConfigError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    if aux is not None and aux.data.ndim != 0:
        raise ShapeError(f"aux objective must be a scalar, got shape {aux.data.shape}")
    use_weighted = lam > 0.0 and direction != "off"
    if not include_global and not use_weighted and aux is None:
        raise ConfigError("given lam/direction nothing remains to optimize")

    g_v2t, g_t2v = contrastive_pair(batch.video_cls, batch.text_cls, temperature)
    w_v2t = w_t2v = None
    if use_weighted:
        if weights is None:
            weights = R.batch_redundancy(
                batch.video_locals, batch.text_locals,
                floor=weight_floor, stop_grad=stop_weight_grad)
        if direction in ("both", "v2t"):
            w_v2t = weighted_v2t(batch.video_cls, batch.text_locals,
                                 weights.token_weights, temperature)
        if direction in ("both", "t2v"):
            w_t2v = weighted_t2v(batch.text_cls, batch.video_locals,
                                 weights.patch_weights, temperature)

    total = None
    if include_global:
        total = T.add(g_v2t, g_t2v)
    if use_weighted:
        parts = [t for t in (w_v2t, w_t2v) if t is not None]
        wsum = parts[0] if len(parts) == 1 else T.add(parts[0], parts[1])
        scaled = T.scalar_mul(wsum, lam)
        total = scaled if total is None else T.add(total, scaled)
    if aux is not None:
        total = aux if total is None else T.add(total, aux)
    return LossBreakdown(g_v2t, g_t2v, w_v2t, w_t2v, total, aux=aux)
