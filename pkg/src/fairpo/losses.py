"""Scalar objectives on clamped per-label probabilities.

Every loss returns its value together with derivatives with respect to the
*logits* of the labels it touches. Model code turns those into parameter
gradients (``model.backprop``), so the same formulas serve the per-instance
API below and the vectorised training step. A probability sitting on the
clamp contributes zero derivative.

The element-wise helpers (``bce_terms``, ``focal_terms``, ``preference_terms``,
``hinge_terms``) accept scalars or arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import model as M

PRIVILEGED = "P"
NON_PRIVILEGED = "NP"

PREFERENCE = "Preference"
FALLBACK = "BceFallback"
HINGE = "Hinge"
POINTWISE = "Pointwise"
SKIPPED = "Skipped"
ROUTINGS = (PREFERENCE, FALLBACK, HINGE, POINTWISE, SKIPPED)

VARIANTS = ("DPO", "SimPO", "CPO")


@dataclass(frozen=True)
class LossConfig:
    beta: float = 1.0
    gamma_margin: float = 0.3
    lambda_cpo: float = 1.0
    epsilon_slack: float = 0.05
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25

    def __post_init__(self):
        vals = [self.beta, self.gamma_margin, self.lambda_cpo, self.epsilon_slack,
                self.focal_gamma, self.focal_alpha]
        if not all(np.isfinite(vals)):
            raise ValueError("loss hyperparameters must be finite")
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if min(self.gamma_margin, self.lambda_cpo, self.epsilon_slack, self.focal_gamma) < 0:
            raise ValueError("gamma_margin, lambda_cpo, epsilon_slack, focal_gamma must be >= 0")
        if not 0.0 < self.focal_alpha <= 1.0:
            raise ValueError("focal_alpha must be in (0, 1]")


# -- element-wise formulas ---------------------------------------------------


def bce_terms(m, y):
    """-[y log m + (1-y) log(1-m)] and its logit derivative ``m - y``."""
    m = np.asarray(m, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    value = -(y * np.log(m) + (1.0 - y) * np.log1p(-m))
    return value, (m - y) * M.unclamped(m)


def focal_terms(m, y, alpha: float, gamma: float):
    """-alpha (1 - p_t)^gamma log p_t with p_t = m if y = 1 else 1 - m."""
    m = np.asarray(m, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    pt = np.where(y == 1, m, 1.0 - m)
    sign = np.where(y == 1, 1.0, -1.0)
    log_pt = np.where(y == 1, np.log(m), np.log1p(-m))
    q = 1.0 - pt
    value = -alpha * q**gamma * log_pt
    # d/du via dp_t/du = sign * p_t (1 - p_t)
    dlogit = alpha * sign * (gamma * q**gamma * pt * log_pt - q ** (gamma + 1.0))
    return value, dlogit * M.unclamped(m)


def preference_terms(m_p, m_d, beta: float, offset=0.0):
    """-log sigmoid(beta (log m_p - log m_d) + offset).

    ``offset`` carries the reference log-ratio for DPO or ``-gamma`` for SimPO.
    Returns (value, dlogit_p, dlogit_d).
    """
    m_p = np.asarray(m_p, dtype=np.float64)
    m_d = np.asarray(m_d, dtype=np.float64)
    h = beta * (np.log(m_p) - np.log(m_d)) + offset
    value = np.logaddexp(0.0, -h)
    dh = -expit(-h)
    return (
        value,
        dh * beta * (1.0 - m_p) * M.unclamped(m_p),
        -dh * beta * (1.0 - m_d) * M.unclamped(m_d),
    )


def dpo_offset(ref_p, ref_d, beta: float):
    return -beta * (np.log(ref_p) - np.log(ref_d))


def hinge_terms(m, ref_m, y, epsilon: float):
    """max(0, bce(m) - bce(ref) - epsilon); zero value and gradient at the kink."""
    live, dlive = bce_terms(m, y)
    ref, _ = bce_terms(ref_m, y)
    excess = live - ref - epsilon
    active = excess > 0
    return np.where(active, excess, 0.0), np.where(active, dlive, 0.0)


def confusing_mask(scores, labels, anchor):
    """Boolean member mask of the confusing set(s), row-wise for 2-D inputs."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    anchor = np.asarray(anchor)
    if scores.ndim == 1:
        return confusing_mask(scores[None], labels[None], anchor[None])[0]
    rows = np.arange(scores.shape[0])
    m_a = scores[rows, anchor][:, None]
    y_a = labels[rows, anchor][:, None]
    neg = (labels == 0) & (scores >= m_a)
    pos = (labels == 1) & (scores <= m_a)
    return np.where(y_a == 1, neg, pos)


def pick_member(mask, u):
    """Member at position floor(u * |S|) in ascending label order, row-wise."""
    mask = np.atleast_2d(mask)
    u = np.atleast_1d(u)
    counts = mask.sum(axis=1)
    j = np.minimum((u * counts).astype(np.int64), counts - 1)
    return np.argmax(np.cumsum(mask, axis=1) > j[:, None], axis=1)


# -- per-instance API --------------------------------------------------------


@dataclass(frozen=True)
class ConfusingSet:
    anchor_label: int
    kind: str  # "NegativesForTruePositive" or "PositivesForTrueNegative"
    members: frozenset[int]

    def __bool__(self):
        return bool(self.members)

    def __len__(self):
        return len(self.members)


@dataclass(frozen=True)
class PreferencePair:
    """Preferred label ``preferred`` should outscore ``dispreferred``.

    The positive label of the pair is always the preferred one: for a true
    positive anchor l with confusing negative k the pair is (l, k); for a
    true negative anchor l with confusing positive k it is (k, l).
    """

    preferred: int
    dispreferred: int
    anchor: int

    @classmethod
    def from_anchor(cls, anchor: int, counterpart: int, y_anchor: int) -> "PreferencePair":
        if y_anchor == 1:
            return cls(anchor, counterpart, anchor)
        return cls(counterpart, anchor, anchor)


@dataclass
class LossSample:
    group: str
    value: float
    routing: str
    logit_grad: dict[int, float] = field(default_factory=dict)

    def labels_touched(self) -> set[int]:
        return {t for t, g in self.logit_grad.items() if g != 0.0}

    def gradient(self, params, features) -> dict[int, M.HeadParams]:
        """Sparse map from label index to that head's parameter gradient."""
        return M.head_gradient(params, features, self.logit_grad)


def _add(grad: dict, t: int, g) -> None:
    grad[int(t)] = grad.get(int(t), 0.0) + float(g)


def bce(score, y):
    value, dlogit = bce_terms(score, y)
    return float(value), float(dlogit)


def focal(score, y, cfg: LossConfig):
    value, dlogit = focal_terms(score, y, cfg.focal_alpha, cfg.focal_gamma)
    return float(value), float(dlogit)


def build_confusing_set(scores, labels, anchor: int) -> ConfusingSet:
    mask = confusing_mask(scores, labels, anchor)
    kind = "NegativesForTruePositive" if labels[anchor] == 1 else "PositivesForTrueNegative"
    return ConfusingSet(int(anchor), kind, frozenset(int(k) for k in np.flatnonzero(mask)))


def pref_dpo(pair: PreferencePair, scores, ref_scores, cfg: LossConfig) -> LossSample:
    p, d = pair.preferred, pair.dispreferred
    off = dpo_offset(ref_scores[p], ref_scores[d], cfg.beta)
    value, gp, gd = preference_terms(scores[p], scores[d], cfg.beta, off)
    grad: dict[int, float] = {}
    _add(grad, p, gp)
    _add(grad, d, gd)
    return LossSample(PRIVILEGED, float(value), PREFERENCE, grad)


def pref_simpo(pair: PreferencePair, scores, cfg: LossConfig) -> LossSample:
    p, d = pair.preferred, pair.dispreferred
    value, gp, gd = preference_terms(scores[p], scores[d], cfg.beta, -cfg.gamma_margin)
    grad: dict[int, float] = {}
    _add(grad, p, gp)
    _add(grad, d, gd)
    return LossSample(PRIVILEGED, float(value), PREFERENCE, grad)


def pref_cpo(pair: PreferencePair, scores, y_anchor: int, cfg: LossConfig) -> LossSample:
    p, d, l = pair.preferred, pair.dispreferred, pair.anchor
    value, gp, gd = preference_terms(scores[p], scores[d], cfg.beta)
    reg, gl = bce_terms(scores[l], y_anchor)
    grad: dict[int, float] = {}
    _add(grad, p, gp)
    _add(grad, d, gd)
    _add(grad, l, cfg.lambda_cpo * gl)
    return LossSample(PRIVILEGED, float(value + cfg.lambda_cpo * reg), PREFERENCE, grad)


def nonprivileged_hinge(score, ref_score, y, cfg: LossConfig, label: int = 0) -> LossSample:
    value, dlogit = hinge_terms(score, ref_score, y, cfg.epsilon_slack)
    grad = {int(label): float(dlogit)} if dlogit != 0.0 else {}
    return LossSample(NON_PRIVILEGED, float(value), HINGE, grad)


def bce_sample(score, y, label: int, group: str, routing: str = POINTWISE) -> LossSample:
    value, dlogit = bce(score, y)
    return LossSample(group, value, routing, {int(label): dlogit})


def privileged_loss(
    features,
    labels,
    anchor: int,
    variant: str,
    rng: np.random.Generator,
    live,
    reference,
    cfg: LossConfig,
    only_confusing_negatives: bool = False,
    no_bce_fallback: bool = False,
) -> LossSample:
    """Preference loss against one uniformly drawn confusing counterpart, or
    BCE on the anchor when the confusing set is empty.

    Draws exactly one ``rng.random()`` when the set is non-empty and nothing
    otherwise.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    labels = np.asarray(labels)
    scores = M.forward(live, features)
    y_l = int(labels[anchor])
    cset = build_confusing_set(scores, labels, anchor)
    if only_confusing_negatives and y_l == 0:
        cset = ConfusingSet(cset.anchor_label, cset.kind, frozenset())
    if not cset:
        if no_bce_fallback:
            return LossSample(PRIVILEGED, 0.0, SKIPPED, {})
        return bce_sample(scores[anchor], y_l, anchor, PRIVILEGED, FALLBACK)
    members = sorted(cset.members)
    k = members[min(int(rng.random() * len(members)), len(members) - 1)]
    pair = PreferencePair.from_anchor(anchor, k, y_l)
    if variant == "DPO":
        return pref_dpo(pair, scores, M.forward(reference, features), cfg)
    if variant == "SimPO":
        return pref_simpo(pair, scores, cfg)
    return pref_cpo(pair, scores, y_l, cfg)
