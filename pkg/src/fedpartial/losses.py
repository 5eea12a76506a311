"""Segmentation losses with analytic gradients w.r.t. the logits.

Every loss takes a logit field of shape (H, W, N) (any leading shape works,
the last axis is the class axis) and returns a :class:`LossResult` whose
``grad`` has the logits' shape.

Three families are provided:

* standard losses on full labels (``dice_loss``, ``ce_loss``, ...),
* marginal losses on merged-class probabilities ``q_m = sum_{n in phi_m} p_n``
  for partially labeled images,
* exclusion losses penalising probability mass placed on classes that are
  known to be mutually exclusive with a pixel's label.

Reductions: Dice terms are aggregated per class over all pixels of the
sample and summed over classes; CE, focal and top-k are averaged over
pixels; Lovasz terms are averaged over classes present in the target.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .labelspace import ExclusionSets, PartialScheme, exclusion_field

BASE_LOSSES = ("dice", "ce", "focal", "topk", "lovasz")
VARIANTS = ("marginal", "exclusion")
ALL_TERMS = tuple(f"{v}_{b}" for v in VARIANTS for b in BASE_LOSSES)
DEFAULT_TERMS = (
    "marginal_dice", "marginal_ce", "marginal_lovasz",
    "exclusion_dice", "exclusion_ce", "exclusion_lovasz",
)


def expand_terms(terms) -> tuple[str, ...]:
    """Normalise a term list; a bare base name ("dice") stands for both variants."""
    out = []
    for t in terms:
        t = str(t).lower()
        if t in BASE_LOSSES:
            out += [f"marginal_{t}", f"exclusion_{t}"]
        elif t in ALL_TERMS:
            out.append(t)
        else:
            raise ValueError(f"unknown loss term {t!r}")
    # canonical order, no duplicates
    return tuple(t for t in ALL_TERMS if t in out)


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 2.0
    topk_fraction: float = 0.10
    epsilon: float = 1.0
    dice_smooth: float = 1e-5
    active_terms: tuple[str, ...] = DEFAULT_TERMS
    term_weights: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0 < self.topk_fraction <= 1:
            raise ValueError("topk_fraction must lie in (0, 1]")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.dice_smooth <= 0:
            raise ValueError("dice_smooth must be > 0")
        object.__setattr__(self, "active_terms", expand_terms(self.active_terms))
        if not self.active_terms:
            raise ValueError("active_terms must not be empty")
        weights = {}
        for k, w in dict(self.term_weights).items():
            for t in expand_terms([k]):
                if float(w) < 0:
                    raise ValueError(f"negative weight for {t}")
                weights[t] = float(w)
        object.__setattr__(self, "term_weights", weights)

    def weight(self, term: str) -> float:
        return self.term_weights.get(term, 1.0)

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "topk_fraction": self.topk_fraction,
            "epsilon": self.epsilon,
            "dice_smooth": self.dice_smooth,
            "active_terms": list(self.active_terms),
            "term_weights": dict(sorted(self.term_weights.items())),
        }


@dataclass
class LossResult:
    value: float
    grad: np.ndarray

    def __add__(self, other: "LossResult") -> "LossResult":
        return LossResult(self.value + other.value, self.grad + other.grad)


# ---------------------------------------------------------------- basics

def _flat(x):
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(-1, x.shape[-1])


def _check_finite(logits):
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    if logits.shape[0] == 0:
        raise ValueError("empty image")


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _logsumexp(z, axis=-1):
    m = z.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return (np.log(np.exp(z - m).sum(axis=axis, keepdims=True)) + m).squeeze(axis)


def marginalize(p, scheme: PartialScheme):
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] != scheme.num_classes:
        raise ValueError(f"probabilities have {p.shape[-1]} classes, scheme expects {scheme.num_classes}")
    return p @ scheme.membership


def _softmax_backward(p, dp):
    """Chain dL/dp through the softmax to dL/dlogits (row-wise)."""
    return p * (dp - (p * dp).sum(axis=-1, keepdims=True))


def _check_target(target, num):
    t = np.asarray(target).reshape(-1).astype(np.int64)
    if t.size and (t.min() < 0 or t.max() >= num):
        raise ValueError(f"target labels must lie in 0..{num - 1}")
    return t


def _topk_count(fraction, n):
    # guard against 0.1 * 30 = 3.0000000000000004
    return max(1, min(n, math.ceil(fraction * n - 1e-9)))


def _topk_select(values, fraction):
    k = _topk_count(fraction, values.size)
    order = np.argsort(-values, kind="stable")  # ties: lowest pixel index first
    return order[:k]


# ---------------------------------------------------------------- Lovasz core

def lovasz_grad(gt_sorted):
    """Gradient of the Lovasz extension of the Jaccard loss w.r.t. sorted errors."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_extension(errors, fg):
    """Value and d(value)/d(errors) of the Jaccard Lovasz extension."""
    order = np.argsort(-errors, kind="stable")
    g = lovasz_grad(fg[order].astype(np.float64))
    grad = np.empty_like(errors)
    grad[order] = g
    return float(np.dot(errors[order], g)), grad


def _lovasz_on_probs(probs, target, num):
    """Lovasz-softmax on (P, C) probabilities; returns value and dL/dprobs."""
    dprobs = np.zeros_like(probs)
    present = [c for c in range(num) if np.any(target == c)]
    if not present:
        return 0.0, dprobs
    total = 0.0
    for c in present:
        fg = (target == c).astype(np.float64)
        err = np.abs(fg - probs[:, c])
        v, g = lovasz_extension(err, fg)
        total += v
        dprobs[:, c] = np.where(fg > 0, -g, g)
    scale = 1.0 / len(present)
    return total * scale, dprobs * scale


# ---------------------------------------------------------------- standard losses

def dice_loss(logits, target, cfg: LossConfig = LossConfig()) -> LossResult:
    f = _flat(logits)
    _check_finite(f)
    n = f.shape[1]
    t = _check_target(target, n)
    p = softmax(f)
    y = np.eye(n)[t]
    inter = (y * p).sum(0)
    denom = y.sum(0) + p.sum(0) + cfg.dice_smooth
    value = float(np.sum(1.0 - 2.0 * inter / denom))
    dp = -2.0 * (y * denom - inter) / denom**2
    return LossResult(value, _softmax_backward(p, dp).reshape(np.shape(logits)))


def ce_loss(logits, target, cfg: LossConfig = LossConfig()) -> LossResult:
    f = _flat(logits)
    _check_finite(f)
    n = f.shape[1]
    t = _check_target(target, n)
    lse = _logsumexp(f)
    per_pixel = lse - f[np.arange(len(t)), t]
    p = softmax(f)
    grad = (p - np.eye(n)[t]) / len(t)
    return LossResult(float(per_pixel.mean()), grad.reshape(np.shape(logits)))


def _focal_terms(logq, one_minus_q, gamma):
    """Per-pixel focal value and the factor c with dL/dlogit = c * (g - p)."""
    q = np.exp(logq)
    mod = one_minus_q**gamma
    value = -mod * logq
    if gamma == 0:
        coef = -np.ones_like(q)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(one_minus_q > 0, gamma * one_minus_q ** (gamma - 1) * q * logq, 0.0)
        coef = d - mod
    return value, coef


def focal_loss(logits, target, cfg: LossConfig = LossConfig()) -> LossResult:
    f = _flat(logits)
    _check_finite(f)
    n = f.shape[1]
    t = _check_target(target, n)
    p = softmax(f)
    y = np.eye(n)[t]
    logp = f - _logsumexp(f)[:, None]
    logq = logp[np.arange(len(t)), t]
    one_minus_q = (p * (1.0 - y)).sum(1)
    value, coef = _focal_terms(logq, one_minus_q, cfg.gamma)
    grad = coef[:, None] * (y - p) / len(t)
    return LossResult(float(value.mean()), grad.reshape(np.shape(logits)))


def topk_loss(logits, target, cfg: LossConfig = LossConfig()) -> LossResult:
    f = _flat(logits)
    _check_finite(f)
    n = f.shape[1]
    t = _check_target(target, n)
    per_pixel = _logsumexp(f) - f[np.arange(len(t)), t]
    sel = _topk_select(per_pixel, cfg.topk_fraction)
    p = softmax(f)
    grad = np.zeros_like(f)
    grad[sel] = (p[sel] - np.eye(n)[t[sel]]) / len(sel)
    return LossResult(float(per_pixel[sel].mean()), grad.reshape(np.shape(logits)))


def lovasz_loss(logits, target, cfg: LossConfig = LossConfig()) -> LossResult:
    f = _flat(logits)
    _check_finite(f)
    n = f.shape[1]
    t = _check_target(target, n)
    p = softmax(f)
    value, dp = _lovasz_on_probs(p, t, n)
    return LossResult(value, _softmax_backward(p, dp).reshape(np.shape(logits)))


# ---------------------------------------------------------------- marginal losses

def _marginal_setup(logits, target, scheme):
    f = _flat(logits)
    _check_finite(f)
    if f.shape[1] != scheme.num_classes:
        raise ValueError(f"logits have {f.shape[1]} classes, scheme expects {scheme.num_classes}")
    t = _check_target(target, scheme.num_merged)
    return f, t


def _merged_log_prob(f, t, scheme):
    """log q_target per pixel plus within-group renormalised probabilities g.

    g[i, n] = p_n / q_target for n in the target's merged class, else 0.
    """
    in_group = scheme.membership.T[t] > 0  # (P, N)
    masked = np.where(in_group, f, -np.inf)
    lse_group = _logsumexp(masked)
    logq = lse_group - _logsumexp(f)
    g = np.where(in_group, np.exp(masked - lse_group[:, None]), 0.0)
    return logq, g


def marginal_dice(logits, target, scheme: PartialScheme, cfg: LossConfig = LossConfig()) -> LossResult:
    f, t = _marginal_setup(logits, target, scheme)
    p = softmax(f)
    q = p @ scheme.membership
    y = np.eye(scheme.num_merged)[t]
    inter = (y * q).sum(0)
    denom = y.sum(0) + q.sum(0) + cfg.dice_smooth
    value = float(np.sum(1.0 - 2.0 * inter / denom))
    dq = -2.0 * (y * denom - inter) / denom**2
    dp = dq @ scheme.membership.T
    return LossResult(value, _softmax_backward(p, dp).reshape(np.shape(logits)))


def _marginal_ce_pixels(f, t, scheme):
    logq, g = _merged_log_prob(f, t, scheme)
    p = softmax(f)
    return -logq, p - g


def marginal_ce(logits, target, scheme: PartialScheme, cfg: LossConfig = LossConfig()) -> LossResult:
    f, t = _marginal_setup(logits, target, scheme)
    per_pixel, dpix = _marginal_ce_pixels(f, t, scheme)
    return LossResult(float(per_pixel.mean()), (dpix / len(t)).reshape(np.shape(logits)))


def marginal_focal(logits, target, scheme: PartialScheme, cfg: LossConfig = LossConfig()) -> LossResult:
    f, t = _marginal_setup(logits, target, scheme)
    logq, g = _merged_log_prob(f, t, scheme)
    p = softmax(f)
    in_group = scheme.membership.T[t] > 0
    one_minus_q = np.where(in_group, 0.0, p).sum(1)
    value, coef = _focal_terms(logq, one_minus_q, cfg.gamma)
    grad = coef[:, None] * (g - p) / len(t)
    return LossResult(float(value.mean()), grad.reshape(np.shape(logits)))


def marginal_topk(logits, target, scheme: PartialScheme, cfg: LossConfig = LossConfig()) -> LossResult:
    f, t = _marginal_setup(logits, target, scheme)
    per_pixel, dpix = _marginal_ce_pixels(f, t, scheme)
    sel = _topk_select(per_pixel, cfg.topk_fraction)
    grad = np.zeros_like(f)
    grad[sel] = dpix[sel] / len(sel)
    return LossResult(float(per_pixel[sel].mean()), grad.reshape(np.shape(logits)))


def marginal_lovasz(logits, target, scheme: PartialScheme, cfg: LossConfig = LossConfig()) -> LossResult:
    f, t = _marginal_setup(logits, target, scheme)
    p = softmax(f)
    q = p @ scheme.membership
    value, dq = _lovasz_on_probs(q, t, scheme.num_merged)
    dp = dq @ scheme.membership.T
    return LossResult(value, _softmax_backward(p, dp).reshape(np.shape(logits)))


# ---------------------------------------------------------------- exclusion losses

def _exclusion_setup(logits, efield):
    f = _flat(logits)
    _check_finite(f)
    e = _flat(efield)
    if e.shape != f.shape:
        raise ValueError(f"exclusion field shape {np.shape(efield)} does not match logits {np.shape(logits)}")
    return f, e


def exclusion_dice(logits, efield, cfg: LossConfig = LossConfig()) -> LossResult:
    f, e = _exclusion_setup(logits, efield)
    p = softmax(f)
    inter = (e * p).sum(0)
    denom = e.sum(0) + p.sum(0) + cfg.dice_smooth
    value = float(np.sum(2.0 * inter / denom))
    dp = 2.0 * (e * denom - inter) / denom**2
    return LossResult(value, _softmax_backward(p, dp).reshape(np.shape(logits)))


def _exclusion_ce_pixels(p, e, eps):
    per_pixel = (e * np.log(p + eps)).sum(1)
    return per_pixel, e / (p + eps)


def exclusion_ce(logits, efield, cfg: LossConfig = LossConfig()) -> LossResult:
    f, e = _exclusion_setup(logits, efield)
    p = softmax(f)
    per_pixel, dp = _exclusion_ce_pixels(p, e, cfg.epsilon)
    grad = _softmax_backward(p, dp) / len(f)
    return LossResult(float(per_pixel.mean()), grad.reshape(np.shape(logits)))


def exclusion_focal(logits, efield, cfg: LossConfig = LossConfig()) -> LossResult:
    f, e = _exclusion_setup(logits, efield)
    p = softmax(f)
    gamma, eps = cfg.gamma, cfg.epsilon
    one_minus_p = 1.0 - p
    log_term = np.log(p + eps)
    mod = one_minus_p**gamma
    per_pixel = (e * mod * log_term).sum(1)
    dp = mod / (p + eps)
    if gamma != 0:
        with np.errstate(divide="ignore", invalid="ignore"):
            dmod = np.where(one_minus_p > 0, gamma * one_minus_p ** (gamma - 1), 0.0)
        dp = dp - dmod * log_term
    grad = _softmax_backward(p, e * dp) / len(f)
    return LossResult(float(per_pixel.mean()), grad.reshape(np.shape(logits)))


def exclusion_topk(logits, efield, cfg: LossConfig = LossConfig()) -> LossResult:
    f, e = _exclusion_setup(logits, efield)
    p = softmax(f)
    per_pixel, dp = _exclusion_ce_pixels(p, e, cfg.epsilon)
    sel = _topk_select(per_pixel, cfg.topk_fraction)
    grad = np.zeros_like(f)
    grad[sel] = _softmax_backward(p[sel], dp[sel]) / len(sel)
    return LossResult(float(per_pixel[sel].mean()), grad.reshape(np.shape(logits)))


def exclusion_lovasz(logits, efield, cfg: LossConfig = LossConfig()) -> LossResult:
    """Lovasz extension per class with the exclusion mask as ground truth.

    Errors are the probability placed on excluded pixels (zero elsewhere);
    classes with an empty exclusion mask are skipped.
    """
    f, e = _exclusion_setup(logits, efield)
    p = softmax(f)
    dp = np.zeros_like(p)
    active = [n for n in range(f.shape[1]) if np.any(e[:, n] > 0)]
    total = 0.0
    for n in active:
        mask = e[:, n]
        v, g = lovasz_extension(p[:, n] * mask, mask)
        total += v
        dp[:, n] = g * mask
    if active:
        total /= len(active)
        dp /= len(active)
    return LossResult(total, _softmax_backward(p, dp).reshape(np.shape(logits)))


# ---------------------------------------------------------------- combination

MARGINAL_LOSSES = {
    "dice": marginal_dice,
    "ce": marginal_ce,
    "focal": marginal_focal,
    "topk": marginal_topk,
    "lovasz": marginal_lovasz,
}
EXCLUSION_LOSSES = {
    "dice": exclusion_dice,
    "ce": exclusion_ce,
    "focal": exclusion_focal,
    "topk": exclusion_topk,
    "lovasz": exclusion_lovasz,
}
STANDARD_LOSSES = {
    "dice": dice_loss,
    "ce": ce_loss,
    "focal": focal_loss,
    "topk": topk_loss,
    "lovasz": lovasz_loss,
}


def exclusion_field_for(merged_target, scheme: PartialScheme, excl: ExclusionSets):
    """Exclusion field of a merged label map; merged background excludes nothing."""
    full = scheme.merged_to_full()[np.asarray(merged_target)]
    return exclusion_field(excl, full)


def combined_loss(logits, merged_target, scheme: PartialScheme, excl: ExclusionSets | None = None,
                  cfg: LossConfig = LossConfig()) -> LossResult:
    if excl is None:
        excl = scheme.exclusion_sets()
    grad = np.zeros(np.shape(logits))
    value = 0.0
    efield = None
    for term in cfg.active_terms:
        w = cfg.weight(term)
        if w == 0.0:
            continue
        variant, base = term.split("_", 1)
        if variant == "marginal":
            r = MARGINAL_LOSSES[base](logits, merged_target, scheme, cfg)
        else:
            if efield is None:
                efield = exclusion_field_for(merged_target, scheme, excl)
            r = EXCLUSION_LOSSES[base](logits, efield, cfg)
        value += w * r.value
        grad += w * r.grad
    return LossResult(float(value), grad)
