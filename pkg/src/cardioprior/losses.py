"""Differentiable segmentation losses with hand-derived gradients.

The baseline objective (Generalized Dice plus Cross-Entropy) and the three
shape-aware regularizers (volume, moment, centroid relations). Every loss
returns a scalar and the analytic gradient with respect to the per-voxel
class probabilities; ``total_loss`` composes enabled terms behind a logits
interface, mapping the probability gradient back through the softmax
Jacobian. ``gradcheck`` verifies any registered loss against central finite
differences on a seeded instance.

Loss functions intentionally do not validate the probability-simplex
invariant: finite-difference probing perturbs single entries off the
simplex and every formula here stays well-defined there. Validation
belongs to ProbVolume.validate at ingestion boundaries.

Weighting convention: each elementary term is scaled by its weight exactly
once, inside the function that computes it; ``total_loss`` sums component
values without re-weighting. A weight of zero disables evaluation of that
component entirely. The ``terms`` map always sums to ``value``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import NoUsableStats, NotOneHot, ShapeMismatch, UnknownLoss
from .stats import MASS_EPSILON, ShapeStats, aggregate, case_descriptor
from .volume import CLASS_NAMES, FOREGROUND_CLASSES, N_CLASSES, ProbVolume, Volume3, one_hot

#: Probability floor inside the cross-entropy log.
CE_CLAMP = 1e-12

#: Centroid segments shorter than this (mm) contribute no relation term.
SEGMENT_MIN_MM = 1e-6

WEIGHT_KEYS = (
    "gdice",
    "ce",
    "volume",
    "moment_centroid",
    "moment_second",
    "relation_dist",
    "relation_angle",
)


def default_weights() -> dict[str, float]:
    return {k: 1.0 for k in WEIGHT_KEYS}


@dataclass(frozen=True)
class LossConfig:
    """Term weights plus the shared numerical knobs.

    ``stats`` is the population reference used by the regularizers; it may
    stay None when only the baseline terms are enabled.
    """

    weights: dict[str, float] = field(default_factory=default_weights)
    stats: ShapeStats | None = None
    epsilon_gd: float = 1e-6
    mass_epsilon: float = MASS_EPSILON

    def __post_init__(self) -> None:
        merged = default_weights()
        for k, v in self.weights.items():
            if k not in merged:
                raise ValueError(f"unknown loss weight {k!r}; valid keys: {WEIGHT_KEYS}")
            v = float(v)
            if not np.isfinite(v) or v < 0.0:
                raise ValueError(f"weight {k!r} must be finite and >= 0, got {v}")
            merged[k] = v
        if not any(v > 0.0 for v in merged.values()):
            raise ValueError("at least one loss weight must be positive")
        if not self.epsilon_gd > 0.0:
            raise ValueError(f"epsilon_gd must be positive, got {self.epsilon_gd}")
        if not self.mass_epsilon > 0.0:
            raise ValueError(f"mass_epsilon must be positive, got {self.mass_epsilon}")
        object.__setattr__(self, "weights", merged)
        object.__setattr__(self, "epsilon_gd", float(self.epsilon_gd))
        object.__setattr__(self, "mass_epsilon", float(self.mass_epsilon))


_DEFAULT_CONFIG = LossConfig()


@dataclass(frozen=True)
class LossEval:
    """Scalar loss, gradient grid, and the per-term decomposition.

    ``grad`` has the ProbVolume data shape and is taken with respect to the
    probabilities for the probability-interface losses and with respect to
    the logits for total_loss. It is None when evaluated value-only.
    The terms always sum to ``value`` (skipped terms appear as 0.0).
    """

    value: float
    grad: np.ndarray | None
    terms: dict[str, float]

    @property
    def grad_p(self) -> np.ndarray | None:
        return self.grad


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax over axis 0 (the class axis)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def _require_same_shape(p: ProbVolume, g: ProbVolume) -> None:
    if p.data.shape != g.data.shape:
        raise ShapeMismatch(f"probability grids differ: {p.data.shape} vs {g.data.shape}")


def _require_one_hot(g: ProbVolume) -> None:
    d = g.data
    if not np.all((d == 0.0) | (d == 1.0)):
        raise NotOneHot("ground truth entries must be exactly 0 or 1")
    if not np.all(d.sum(axis=0) == 1.0):
        raise NotOneHot("ground truth must assign exactly one class per voxel")


def gdice_ce(
    p: ProbVolume, g: ProbVolume, cfg: LossConfig = _DEFAULT_CONFIG, *, need_grad: bool = True
) -> LossEval:
    """Generalized Dice plus cross-entropy against a one-hot ground truth.

    GDice = 1 - 2*sum_c w_c <p_c, g_c> / (sum_c w_c (sum p_c + sum g_c) + eps)
    with w_c = 1/(sum_x g_c + eps)^2; CE = -(1/N) sum_x log p_{g(x)}(x) with
    the probability clamped at 1e-12. Gradients are analytic for both.
    """
    _require_same_shape(p, g)
    _require_one_hot(g)
    w_gd = cfg.weights["gdice"]
    w_ce = cfg.weights["ce"]
    eps = cfg.epsilon_gd
    P = p.data.reshape(N_CLASSES, -1)
    G = g.data.reshape(N_CLASSES, -1)
    n_vox = P.shape[1]

    g_sum = G.sum(axis=1)
    w_c = 1.0 / (g_sum + eps) ** 2
    num = float((w_c * (P * G).sum(axis=1)).sum())
    den = float((w_c * (P.sum(axis=1) + g_sum)).sum()) + eps
    gdice = 1.0 - 2.0 * num / den

    p_true = (P * G).sum(axis=0)
    p_clamped = np.maximum(p_true, CE_CLAMP)
    ce = float(-np.log(p_clamped).sum()) / n_vox

    value = w_gd * gdice + w_ce * ce
    terms = {"gdice": w_gd * gdice, "ce": w_ce * ce}
    grad = None
    if need_grad:
        # d GDice / d p_c(x) = -2 w_c (g_c(x) den - num) / den^2
        grad_flat = (-2.0 * w_gd / den**2) * (w_c[:, None] * (G * den - num))
        # CE contributes only at the annotated class; zero where the clamp binds
        live = p_true > CE_CLAMP
        grad_flat -= (w_ce / n_vox) * G * (live / p_clamped)[None, :]
        grad = grad_flat.reshape(p.data.shape)
    return LossEval(value=float(value), grad=grad, terms=terms)


def volume_loss(
    p: ProbVolume,
    stats: ShapeStats,
    cfg: LossConfig = _DEFAULT_CONFIG,
    *,
    need_grad: bool = True,
) -> LossEval:
    """Squared z-scores of soft volumes against the population statistics.

    L = w * sum_c ((V_c - mu_c)/sigma_c)^2; the gradient is the constant
    2 w z_c / sigma_c * voxel_volume over class c's grid. Classes without
    stats or with sigma = 0 are skipped and listed in terms as 0.0.
    """
    w = cfg.weights["volume"]
    vv = p.voxel_volume
    P = p.data.reshape(N_CLASSES, -1)
    terms: dict[str, float] = {}
    value = 0.0
    grad = np.zeros_like(p.data) if need_grad else None
    any_scored = False
    for c in FOREGROUND_CLASSES:
        name = CLASS_NAMES[c]
        sigma = float(stats.volume_std[c])
        if int(stats.class_n[c]) == 0 or not np.isfinite(sigma) or sigma <= 0.0:
            # stable key set: the trace aggregation relies on every case
            # reporting the same columns
            terms[f"volume_{name}"] = 0.0
            continue
        any_scored = True
        z = (float(P[c].sum()) * vv - float(stats.volume_mean[c])) / sigma
        term = w * z * z
        terms[f"volume_{name}"] = term
        value += term
        if grad is not None:
            grad[c] += 2.0 * w * z / sigma * vv
    if not any_scored:
        raise NoUsableStats("volume_loss: every class lacks usable volume statistics")
    return LossEval(value=float(value), grad=grad, terms=terms)


def moment_loss(
    p: ProbVolume,
    stats: ShapeStats,
    cfg: LossConfig = _DEFAULT_CONFIG,
    *,
    need_grad: bool = True,
) -> LossEval:
    """Squared L2/Frobenius distance of soft moments to the reference means.

    L = sum_c [ w1 ||m_c - mbar_c||^2 + w2 ||M_c - Mbar_c||_F^2 ] with m the
    soft centroid and M the central second moment. Gradients use
    dm/dp(x) = (x - m)/mass and dM/dp(x) = ((x-m)(x-m)^T - M)/mass.
    Low-mass classes and classes without stats are skipped.
    """
    w1 = cfg.weights["moment_centroid"]
    w2 = cfg.weights["moment_second"]
    P = p.data.reshape(N_CLASSES, -1)
    C = p.world_coordinates().reshape(3, -1)
    mass = P.sum(axis=1)
    terms: dict[str, float] = {}
    value = 0.0
    grad = np.zeros_like(p.data) if need_grad else None
    grad_flat = grad.reshape(N_CLASSES, -1) if grad is not None else None
    any_scored = False
    for c in FOREGROUND_CLASSES:
        name = CLASS_NAMES[c]
        if int(stats.class_n[c]) == 0 or mass[c] < cfg.mass_epsilon:
            terms[f"moment_centroid_{name}"] = 0.0
            terms[f"moment_second_{name}"] = 0.0
            continue
        any_scored = True
        m = C @ P[c] / mass[c]
        d = C - m[:, None]
        M = (d * P[c]) @ d.T / mass[c]
        dm = m - stats.centroid_mean[c]
        dM = M - stats.second_moment_mean[c]
        t1 = w1 * float(dm @ dm)
        t2 = w2 * float((dM * dM).sum())
        terms[f"moment_centroid_{name}"] = t1
        terms[f"moment_second_{name}"] = t2
        value += t1 + t2
        if grad_flat is not None:
            grad_flat[c] += (2.0 * w1 / mass[c]) * (dm @ d)
            quad = (d * (dM @ d)).sum(axis=0)  # d^T (M - Mbar) d per voxel
            grad_flat[c] += (2.0 * w2 / mass[c]) * (quad - float((dM * M).sum()))
    if not any_scored:
        raise NoUsableStats("moment_loss: every class lacks mass or moment statistics")
    return LossEval(value=float(value), grad=grad, terms=terms)


def _relation_indices() -> tuple[np.ndarray, np.ndarray]:
    pairs = [
        (i, j)
        for n, i in enumerate(FOREGROUND_CLASSES)
        for j in FOREGROUND_CLASSES[n + 1:]
    ]
    triples = []
    for j in FOREGROUND_CLASSES:
        rest = [c for c in FOREGROUND_CLASSES if c != j]
        for n, i in enumerate(rest):
            triples.extend((i, j, k) for k in rest[n + 1:])
    return np.asarray(pairs, dtype=np.intp), np.asarray(triples, dtype=np.intp)


_PAIRS, _TRIPLES = _relation_indices()  # 21 pairs, 105 vertex-ordered triples


def _aligned_relation_stats(stats: ShapeStats) -> tuple[np.ndarray, ...]:
    """Pair/triple means and stds gathered into arrays aligned with _PAIRS/_TRIPLES."""
    p_mean = np.full(len(_PAIRS), np.nan)
    p_std = np.zeros(len(_PAIRS))
    for t, (i, j) in enumerate(_PAIRS):
        e = stats.pair_stats.get((int(i), int(j)))
        if e is not None:
            p_mean[t], p_std[t] = e[0], e[1]
    t_mean = np.full(len(_TRIPLES), np.nan)
    t_std = np.zeros(len(_TRIPLES))
    for t, (i, j, k) in enumerate(_TRIPLES):
        e = stats.triple_stats.get((int(i), int(j), int(k)))
        if e is not None:
            t_mean[t], t_std[t] = e[0], e[1]
    return p_mean, p_std, t_mean, t_std


def relation_loss(
    p: ProbVolume,
    stats: ShapeStats,
    cfg: LossConfig = _DEFAULT_CONFIG,
    *,
    need_grad: bool = True,
) -> LossEval:
    """Squared z-scores of centroid distances and vertex cosines.

    L = w_d sum_pairs ((d_ij - dbar)/s)^2 + w_a sum_triples ((cos - cbar)/s)^2
    over soft centroids. Pairs/triples with zero reference std, missing
    stats, or segments shorter than 1e-6 mm are skipped. The gradient chains
    through the centroids via dm_c/dp_c(x) = (x - m_c)/mass_c.
    """
    w_d = cfg.weights["relation_dist"]
    w_a = cfg.weights["relation_angle"]
    P = p.data.reshape(N_CLASSES, -1)
    C = p.world_coordinates().reshape(3, -1)
    mass = P.sum(axis=1)
    usable = np.zeros(N_CLASSES, dtype=bool)
    for c in FOREGROUND_CLASSES:
        usable[c] = mass[c] >= cfg.mass_epsilon and stats.class_usable(c)
    if int(usable.sum()) < 2:
        raise NoUsableStats("relation_loss: fewer than two classes with usable mass and stats")

    m = np.zeros((N_CLASSES, 3))
    for c in FOREGROUND_CLASSES:
        if usable[c]:
            m[c] = C @ P[c] / mass[c]
    p_mean, p_std, t_mean, t_std = _aligned_relation_stats(stats)
    G = np.zeros((N_CLASSES, 3))  # dL/dm_c accumulator
    dist_val = 0.0
    angle_val = 0.0

    if w_d > 0.0:
        I, J = _PAIRS[:, 0], _PAIRS[:, 1]
        dvec = m[I] - m[J]
        d = np.linalg.norm(dvec, axis=1)
        ok = usable[I] & usable[J] & (p_std > 0.0) & np.isfinite(p_mean) & (d >= SEGMENT_MIN_MM)
        if ok.any():
            z = (d[ok] - p_mean[ok]) / p_std[ok]
            dist_val = w_d * float(z @ z)
            if need_grad:
                coef = 2.0 * w_d * z / (p_std[ok] * d[ok])
                np.add.at(G, I[ok], coef[:, None] * dvec[ok])
                np.add.at(G, J[ok], -coef[:, None] * dvec[ok])

    if w_a > 0.0:
        I, J, K = _TRIPLES[:, 0], _TRIPLES[:, 1], _TRIPLES[:, 2]
        u = m[I] - m[J]
        v = m[K] - m[J]
        nu = np.linalg.norm(u, axis=1)
        nv = np.linalg.norm(v, axis=1)
        ok = (
            usable[I] & usable[J] & usable[K]
            & (t_std > 0.0) & np.isfinite(t_mean)
            & (nu >= SEGMENT_MIN_MM) & (nv >= SEGMENT_MIN_MM)
        )
        if ok.any():
            u, v, nu, nv = u[ok], v[ok], nu[ok], nv[ok]
            cos = (u * v).sum(axis=1) / (nu * nv)
            z = (cos - t_mean[ok]) / t_std[ok]
            angle_val = w_a * float(z @ z)
            if need_grad:
                # d cos / d u = v/(|u||v|) - cos u/|u|^2, symmetric in v
                dc_du = v / (nu * nv)[:, None] - (cos / nu**2)[:, None] * u
                dc_dv = u / (nu * nv)[:, None] - (cos / nv**2)[:, None] * v
                coef = (2.0 * w_a * z / t_std[ok])[:, None]
                np.add.at(G, I[ok], coef * dc_du)
                np.add.at(G, K[ok], coef * dc_dv)
                np.add.at(G, J[ok], -coef * (dc_du + dc_dv))

    grad = None
    if need_grad:
        grad = np.zeros_like(p.data)
        grad_flat = grad.reshape(N_CLASSES, -1)
        for c in FOREGROUND_CLASSES:
            if usable[c] and G[c].any():
                grad_flat[c] = (G[c] @ C - G[c] @ m[c]) / mass[c]
    value = dist_val + angle_val
    terms = {"relation_dist": dist_val, "relation_angle": angle_val}
    return LossEval(value=float(value), grad=grad, terms=terms)


def total_loss(
    logits: np.ndarray,
    g: ProbVolume,
    cfg: LossConfig = _DEFAULT_CONFIG,
    *,
    need_grad: bool = True,
) -> LossEval:
    """Weighted sum of enabled components over softmax(logits).

    Returns the gradient with respect to the logits: with s = softmax,
    dL/dz_c = p_c (dL/dp_c - sum_d p_d dL/dp_d) per voxel. Components whose
    weights are all zero are not evaluated at all.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.shape != g.data.shape:
        raise ShapeMismatch(f"logits shape {z.shape} does not match ground truth {g.data.shape}")
    p = ProbVolume(softmax(z), g.spacing, g.offset)
    w = cfg.weights
    value = 0.0
    terms: dict[str, float] = {}
    grad_p = np.zeros_like(p.data) if need_grad else None

    def _accumulate(ev: LossEval) -> None:
        nonlocal value, grad_p
        value += ev.value
        terms.update(ev.terms)
        if grad_p is not None:
            grad_p += ev.grad

    if w["gdice"] > 0.0 or w["ce"] > 0.0:
        _accumulate(gdice_ce(p, g, cfg, need_grad=need_grad))
    regularized = (
        ("volume",) if w["volume"] > 0.0 else ()
    ) + (
        ("moment",) if w["moment_centroid"] > 0.0 or w["moment_second"] > 0.0 else ()
    ) + (
        ("relation",) if w["relation_dist"] > 0.0 or w["relation_angle"] > 0.0 else ()
    )
    if regularized and cfg.stats is None:
        raise NoUsableStats(f"cfg.stats required for enabled components {regularized}")
    if "volume" in regularized:
        _accumulate(volume_loss(p, cfg.stats, cfg, need_grad=need_grad))
    if "moment" in regularized:
        _accumulate(moment_loss(p, cfg.stats, cfg, need_grad=need_grad))
    if "relation" in regularized:
        _accumulate(relation_loss(p, cfg.stats, cfg, need_grad=need_grad))

    grad = None
    if need_grad:
        grad = p.data * (grad_p - (p.data * grad_p).sum(axis=0, keepdims=True))
    return LossEval(value=float(value), grad=grad, terms=terms)


# ---------------------------------------------------------------------------
# Finite-difference verification


_LOSS_ALIASES = {
    "gdice_ce": "gdice_ce",
    "volume": "volume",
    "volume_loss": "volume",
    "moment": "moment",
    "moment_loss": "moment",
    "relation": "relation",
    "relation_loss": "relation",
    "total": "total",
    "total_loss": "total",
}

GRADCHECK_LOSSES = ("gdice_ce", "volume", "moment", "relation", "total")


def _gradcheck_instance(size: int, seed: int, name: str = "gdice_ce"):
    """Deterministic random instance: logits, probabilities, one-hot GT.

    Non-unit anisotropic spacing so grid-geometry bugs cannot cancel out.
    Logits are random noise on top of a per-class octant bias, giving each
    class a distinct spatial concentration. The bias is load-bearing twice
    over: it bounds every probability well away from the CE clamp, and it
    separates the soft centroids by several mm. With coincident centroids
    (plain random softmax) the cosine terms carry 1/|segment|^3 curvature,
    and the finite-difference truncation error alone exceeds the tolerance.
    GT follows the octants so no annotated voxel sits near the clamp, where
    the difference quotient turns cubic in 1/p.

    The total check differences over logits, where the softmax Jacobian
    multiplies every gradient entry by p_c(x); it gets a weaker bias so the
    smallest probability, and with it the smallest entry, stays above the
    noise floor of the loss value.
    """
    rng = np.random.default_rng(seed)
    dims = (size, size, size)
    spacing = (1.5, 1.0, 0.75)
    offset = tuple(-spacing[a] * (dims[a] - 1) / 2.0 for a in range(3))

    ix, iy, iz = np.indices(dims)
    octant = (ix >= dims[0] // 2) + 2 * (iy >= dims[1] // 2) + 4 * (iz >= dims[2] // 2)
    amp, spread = (1.0, 0.35) if name == "total" else (2.2, 0.5)
    bias = amp * (np.arange(N_CLASSES)[:, None, None, None] == octant[None])
    logits = bias + spread * rng.standard_normal((N_CLASSES,) + dims)
    p = ProbVolume(softmax(logits), spacing, offset)
    g = one_hot(Volume3(octant.astype(np.uint8), spacing, offset))
    return logits, p, g


def _gradcheck_stats(name: str, p: ProbVolume) -> tuple[ShapeStats, dict[str, float]]:
    """Statistics and weights tailored per checked loss.

    The stats are the case's own descriptors shifted by fixed offsets, so
    every z-score is O(1) by construction for any seed; sampling stats from
    random cases instead leaves the stds to chance, and accidentally tiny
    stds swamp the central difference with cancellation noise.

    The per-entry relative criterion needs every gradient entry to clear
    the FD noise floor eps*|L|/(2h), and the component checks pull the
    design in opposite directions. Checked over probabilities, the relation
    gradient of class c is a rank-one linear field crossing zero inside the
    volume, so its stds are kept sharp: large gradients shrink the window
    around the zero plane where entries drown in noise. Checked over
    logits, every entry is multiplied by p_c(x), so the total instead keeps
    the regularizers enabled at small weight under a dominant gdice+ce
    pair: cross-entropy through the softmax Jacobian contributes
    (p_c - g_c)/n_vox per entry, which cannot vanish while probabilities
    stay away from 0 and 1, anchoring every entry above the noise floor.
    """
    d = case_descriptor(p)
    sign = np.where(np.arange(N_CLASSES) % 2 == 0, 1.0, -1.0)
    if name == "total":
        weights = dict.fromkeys(default_weights(), 1e-3)
        weights["gdice"] = 1.0
        weights["ce"] = 1.0
        volume_mean = d.soft_volume * 0.98
        volume_std = 0.05 * d.soft_volume
        centroid_mean = d.soft_centroid + np.outer(sign, (0.01, -0.0075, 0.005))
        second_moment_mean = d.second_moment * (1.0 + 0.0003 * sign)[:, None, None]
        pair_stats = {k: (v + 0.015, 2.0, 3) for k, v in d.pair_distance.items()}
        triple_stats = {
            k: (v + 0.0075 * (1.0 if sum(k) % 2 == 0 else -1.0), 1.5, 3)
            for k, v in d.triple_cosine.items()
        }
    else:
        weights = default_weights()
        volume_mean = d.soft_volume * (1.0 + 0.2 * sign)
        volume_std = 0.5 * d.soft_volume
        centroid_mean = d.soft_centroid + np.outer(sign, (0.25, -0.2, 0.15))
        second_moment_mean = d.second_moment * (1.0 + 0.03 * sign)[:, None, None]
        pair_stats = {k: (v + 0.04, 0.1, 3) for k, v in d.pair_distance.items()}
        triple_stats = {
            k: (v + 0.02 * (1.0 if sum(k) % 2 == 0 else -1.0), 0.05, 3)
            for k, v in d.triple_cosine.items()
        }
    stats = ShapeStats(
        volume_mean=volume_mean,
        volume_std=volume_std,
        centroid_mean=centroid_mean,
        second_moment_mean=second_moment_mean,
        class_n=np.full(N_CLASSES, 3, dtype=np.intp),
        pair_stats=pair_stats,
        triple_stats=triple_stats,
        n_cases=3,
    )
    return stats, weights


def gradcheck(loss_name: str, size: int = 8, seed: int = 0, step: float = 1e-5) -> dict:
    """Analytic vs central finite-difference gradient over every input entry.

    Relative error uses denominator max(|analytic|, |fd|, 1e-8). Returns a
    JSON-ready report with the max errors and their entry location.
    """
    name = _LOSS_ALIASES.get(loss_name)
    if name is None:
        raise UnknownLoss(f"unknown loss {loss_name!r}; known: {GRADCHECK_LOSSES}")
    logits, p, g = _gradcheck_instance(size, seed, name)
    stats, weights = _gradcheck_stats(name, p)
    cfg = LossConfig(weights=weights, stats=stats)
    if name == "gdice_ce":
        x, f = p.data, lambda ng: gdice_ce(p, g, cfg, need_grad=ng)
    elif name == "volume":
        x, f = p.data, lambda ng: volume_loss(p, stats, cfg, need_grad=ng)
    elif name == "moment":
        x, f = p.data, lambda ng: moment_loss(p, stats, cfg, need_grad=ng)
    elif name == "relation":
        x, f = p.data, lambda ng: relation_loss(p, stats, cfg, need_grad=ng)
    else:
        x, f = logits, lambda ng: total_loss(logits, g, cfg, need_grad=ng)

    full = f(True)
    analytic = full.grad
    flat = x.reshape(-1)
    fd = np.empty(flat.size)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + step
        hi = f(False).value
        flat[idx] = orig - step
        lo = f(False).value
        flat[idx] = orig
        fd[idx] = (hi - lo) / (2.0 * step)
    an = analytic.reshape(-1)
    abs_err = np.abs(an - fd)
    rel_err = abs_err / np.maximum(np.maximum(np.abs(an), np.abs(fd)), 1e-8)
    worst = int(np.argmax(rel_err))
    return {
        "loss": name,
        "size": size,
        "seed": seed,
        "step": step,
        "value": full.value,
        "n_entries": int(flat.size),
        "max_rel_err": float(rel_err[worst]),
        "max_abs_err": float(abs_err.max()),
        "argmax": [int(i) for i in np.unravel_index(worst, x.shape)],
    }


# ---------------------------------------------------------------------------
# Loss-config file format (stats are referenced separately, never embedded)


def save_loss_config(cfg: LossConfig, path: str | os.PathLike) -> None:
    doc = {
        "schema": "loss-config/1",
        "weights": cfg.weights,
        "epsilon_gd": cfg.epsilon_gd,
        "mass_epsilon": cfg.mass_epsilon,
    }
    with open(os.fspath(path), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_loss_config(path: str | os.PathLike, stats: ShapeStats | None = None) -> LossConfig:
    with open(os.fspath(path), "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("schema") != "loss-config/1":
        raise ValueError(f"unrecognized loss config schema in {path}")
    return LossConfig(
        weights=dict(doc["weights"]),
        stats=stats,
        epsilon_gd=doc.get("epsilon_gd", 1e-6),
        mass_epsilon=doc.get("mass_epsilon", MASS_EPSILON),
    )
