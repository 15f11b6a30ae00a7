"""Training objectives: auxiliary masked-LM loss, corrective LM with a copy
gate, in-batch sequence contrast, detection-head losses, and the mode table
that composes them.

The corrective LM probability mixes a copy gate with the LM softmax:

    p(x) = [x == input] * p_gate(copy) + p_gate(correct) * softmax(lm_logits)[x]

The gate factors are normally wrapped in a stop-gradient inside the LM loss,
so the gate trains only through its own binary cross-entropy term; the
``clm_no_stopgrad`` mode lifts that.

Contrast batches hold 2N views laid out as [corrupted_1..N, cropped_1..N];
anchor i's positive is row (i + N) mod 2N and the other 2N - 2 rows are its
negatives.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PLM_CLAMP = 1e-12


class ObjectiveMode(str, enum.Enum):
    FULL = "full"
    RTD_ONLY = "rtd_only"
    CLM_ONLY = "clm_only"
    SCL_PLUS_RTD = "scl_plus_rtd"
    ALL_TOKEN_MLM = "all_token_mlm"
    CLM_NO_COPY = "clm_no_copy"
    CLM_NO_STOPGRAD = "clm_no_stopgrad"


_USES_SCL = {ObjectiveMode.FULL, ObjectiveMode.SCL_PLUS_RTD,
             ObjectiveMode.CLM_NO_COPY, ObjectiveMode.CLM_NO_STOPGRAD}
_USES_CLM = {ObjectiveMode.FULL, ObjectiveMode.CLM_ONLY,
             ObjectiveMode.CLM_NO_COPY, ObjectiveMode.CLM_NO_STOPGRAD}
_USES_COPY_LOSS = {ObjectiveMode.FULL, ObjectiveMode.CLM_ONLY,
                   ObjectiveMode.CLM_NO_STOPGRAD}
_USES_RTD = {ObjectiveMode.RTD_ONLY, ObjectiveMode.SCL_PLUS_RTD}


def uses_scl(mode: ObjectiveMode) -> bool:
    return mode in _USES_SCL


def uses_clm(mode: ObjectiveMode) -> bool:
    return mode in _USES_CLM


def uses_copy_loss(mode: ObjectiveMode) -> bool:
    return mode in _USES_COPY_LOSS


def uses_rtd(mode: ObjectiveMode) -> bool:
    return mode in _USES_RTD


def uses_all_token_lm(mode: ObjectiveMode) -> bool:
    return mode is ObjectiveMode.ALL_TOKEN_MLM


def stopgrad_on(mode: ObjectiveMode) -> bool:
    return mode is not ObjectiveMode.CLM_NO_STOPGRAD


@dataclass
class LossBreakdown:
    """Scalar per-step values of every component plus the combined total."""

    l_mlm_aux: float = 0.0
    l_copy: float = 0.0
    l_lm: float = 0.0
    l_scl: float = 0.0
    l_rtd: float = 0.0
    total: float = 0.0
    lambda_copy: float = 50.0


def mlm_loss(logits: Tensor, target_ids: np.ndarray) -> Tensor:
    """Mean cross-entropy at the selected positions: -log softmax[target]."""
    if len(target_ids) == 0:
        raise ValueError("mlm_loss needs at least one masked position")
    picked = ad.select_last(ad.log_softmax(logits, axis=-1), np.asarray(target_ids))
    return ad.neg(ad.reduce_mean(picked))


def copy_prob(copy_logit: Tensor) -> tuple[Tensor, Tensor]:
    """(p_gate(copy), p_gate(correct)); the pair sums to one."""
    p1 = ad.sigmoid(copy_logit)
    return p1, ad.sub(Tensor(1.0), p1)


def _bce_elements(logits: Tensor, replaced_flags: np.ndarray) -> Tensor:
    # target 1 (copy) where not replaced: -log sigmoid(z) = softplus(-z);
    # target 0 where replaced: -log(1 - sigmoid(z)) = softplus(z)
    sign = np.where(np.asarray(replaced_flags), 1.0, -1.0)
    return ad.softplus(ad.mul(logits, Tensor(sign)))


def copy_loss(copy_logits: Tensor, replaced_flags: np.ndarray,
              pad_mask: np.ndarray | None = None) -> Tensor:
    """Binary cross-entropy of the copy gate, averaged over non-pad tokens."""
    elems = _bce_elements(copy_logits, replaced_flags)
    return _masked_mean(elems, pad_mask)


def rtd_loss(rtd_logits: Tensor, replaced_flags: np.ndarray,
             pad_mask: np.ndarray | None = None) -> Tensor:
    """Detection-head loss; same form as copy_loss on its own logits."""
    return copy_loss(rtd_logits, replaced_flags, pad_mask)


def _masked_mean(elems: Tensor, pad_mask: np.ndarray | None) -> Tensor:
    if pad_mask is None:
        return ad.reduce_mean(elems)
    count = float(np.sum(pad_mask))
    if count == 0:
        raise ValueError("empty pad mask")
    total = ad.reduce_sum(ad.mul(elems, Tensor(np.asarray(pad_mask, dtype=float))))
    return ad.mul(total, Tensor(1.0 / count))


def _plm_selected(lm_logits: Tensor, copy_logits: Tensor, input_ids: np.ndarray,
                  query_ids: np.ndarray, stopgrad: bool,
                  use_copy_gate: bool = True) -> Tensor:
    """p_LM(query) per position, any leading shape."""
    soft_sel = ad.select_last(ad.softmax(lm_logits, axis=-1), np.asarray(query_ids))
    if not use_copy_gate:
        return soft_sel
    p1, p0 = copy_prob(copy_logits)
    if stopgrad:
        p1, p0 = ad.stop_gradient(p1), ad.stop_gradient(p0)
    indicator = Tensor((np.asarray(query_ids) == np.asarray(input_ids)).astype(float))
    return ad.add(ad.mul(indicator, p1), ad.mul(p0, soft_sel))


def corrective_lm_dist(lm_logits: Tensor, copy_logits: Tensor,
                       input_ids: np.ndarray, stopgrad: bool = True) -> Tensor:
    """Full p_LM distribution over the vocabulary (rows sum to one)."""
    soft = ad.softmax(lm_logits, axis=-1)
    p1, p0 = copy_prob(copy_logits)
    if stopgrad:
        p1, p0 = ad.stop_gradient(p1), ad.stop_gradient(p0)
    vocab = lm_logits.shape[-1]
    onehot = np.zeros(lm_logits.shape)
    np.put_along_axis(onehot, np.asarray(input_ids)[..., None], 1.0, axis=-1)
    p1e = ad.reshape(p1, p1.shape + (1,))
    p0e = ad.reshape(p0, p0.shape + (1,))
    return ad.add(ad.mul(Tensor(onehot), p1e), ad.mul(p0e, soft))


class ClampCounter:
    """Counts probability floors hit by the LM loss (exact zeros guarded)."""

    def __init__(self):
        self.count = 0


def lm_loss(lm_logits: Tensor, copy_logits: Tensor, input_ids: np.ndarray,
            original_ids: np.ndarray, stopgrad: bool = True,
            use_copy_gate: bool = True,
            clamp_counter: ClampCounter | None = None) -> Tensor:
    """Mean -log p_LM(original) over the given (usually masked) positions."""
    if len(original_ids) == 0:
        raise ValueError("lm_loss needs at least one position")
    p_sel = _plm_selected(lm_logits, copy_logits, input_ids, original_ids,
                          stopgrad, use_copy_gate)
    if clamp_counter is not None:
        clamp_counter.count += int(np.sum(p_sel.data < PLM_CLAMP))
    return ad.neg(ad.reduce_mean(ad.log(ad.clamp_min(p_sel, PLM_CLAMP))))


def all_token_mlm_loss(lm_logits: Tensor, copy_logits: Tensor, input_ids: np.ndarray,
                       original_ids: np.ndarray, pad_mask: np.ndarray | None = None,
                       clamp_counter: ClampCounter | None = None) -> Tensor:
    """-log p_LM(original) averaged over all non-pad tokens, gate live (no
    stop-gradient, no separate gate loss)."""
    p_sel = _plm_selected(lm_logits, copy_logits, input_ids, original_ids,
                          stopgrad=False, use_copy_gate=True)
    if clamp_counter is not None:
        clamp_counter.count += int(np.sum(p_sel.data < PLM_CLAMP))
    return _masked_mean(ad.neg(ad.log(ad.clamp_min(p_sel, PLM_CLAMP))), pad_mask)


def contrast_positive_index(num_views: int) -> np.ndarray:
    """Positive row per anchor under the [corrupted block | cropped block] layout."""
    n = num_views // 2
    idx = np.arange(num_views)
    return (idx + n) % num_views


def scl_loss_from_sims(sims: Tensor, tau: float) -> Tensor:
    """Mean in-batch contrastive loss given the full (2N, 2N) cosine matrix."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    two_n = sims.shape[0]
    if two_n < 4 or two_n % 2 != 0:
        raise ValueError("contrastive batch too small (need at least 2 origins)")
    pos_idx = contrast_positive_index(two_n)
    scaled = ad.mul(sims, Tensor(1.0 / tau))
    pos = ad.select_last(scaled, pos_idx)
    neg_mask = np.ones((two_n, two_n))
    np.fill_diagonal(neg_mask, 0.0)
    neg_mask[np.arange(two_n), pos_idx] = 0.0
    neg_sum = ad.reduce_sum(ad.mul(ad.exp(scaled), Tensor(neg_mask)), axis=-1)
    denom = ad.add(ad.exp(pos), neg_sum)
    return ad.reduce_mean(ad.sub(ad.log(denom), pos))


def scl_loss(embeddings: Tensor, tau: float = 1.0) -> Tensor:
    """Contrast 2N sequence embeddings: positives are the paired views, the
    similarity is cosine, and the result is the mean over all 2N anchors."""
    normed = ad.normalize_rows(embeddings)
    sims = ad.matmul(normed, ad.transpose(normed, (1, 0)))
    return scl_loss_from_sims(sims, tau)


_REQUIRED = {
    ObjectiveMode.FULL: ("mlm_aux", "copy", "lm", "scl"),
    ObjectiveMode.RTD_ONLY: ("mlm_aux", "rtd"),
    ObjectiveMode.CLM_ONLY: ("mlm_aux", "copy", "lm"),
    ObjectiveMode.SCL_PLUS_RTD: ("mlm_aux", "rtd", "scl"),
    ObjectiveMode.ALL_TOKEN_MLM: ("mlm_aux", "all_token_lm"),
    ObjectiveMode.CLM_NO_COPY: ("mlm_aux", "lm", "scl"),
    ObjectiveMode.CLM_NO_STOPGRAD: ("mlm_aux", "copy", "lm", "scl"),
}


def required_components(mode: ObjectiveMode) -> tuple[str, ...]:
    return _REQUIRED[mode]


def total_loss(mode: ObjectiveMode, components: dict[str, Tensor],
               lambda_copy: float) -> Tensor:
    """Sum the mode's active components; the copy term is weighted by
    lambda_copy, everything else enters with weight one."""
    missing = [k for k in _REQUIRED[mode] if k not in components]
    if missing:
        raise ValueError(f"mode {mode.value} missing components: {missing}")
    total = components["mlm_aux"]
    for key in _REQUIRED[mode][1:]:
        term = components[key]
        if key == "copy":
            term = ad.mul(term, Tensor(float(lambda_copy)))
        total = ad.add(total, term)
    return total
