"""Soft shape descriptors and their population statistics.

A *soft* quantity is computed from per-voxel class probabilities rather than
hard labels, which makes it differentiable: soft volume is probability mass
times voxel volume, the soft centroid is the probability-weighted mean world
coordinate, and the soft second moment is the probability-weighted central
covariance of world coordinates (its eigenstructure describes the best-fit
ellipsoid).

Centroid relations are stored as pairwise distances (mm) and as cosines of
the angle at a vertex centroid, which avoids any angle-unit or wraparound
convention. Population statistics use population (divide-by-n) standard
deviations and are computed per quantity only over the cases where that
quantity is present.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from ._version import __version__
from .errors import VanishingMass
from .volume import CLASS_NAMES, FOREGROUND_CLASSES, N_CLASSES, ProbVolume

#: Soft-mass floor (in voxels of probability mass) below which moment
#: quantities are reported absent instead of risking near-zero denominators.
MASS_EPSILON = 1e-6

#: Centroid segments shorter than this (mm) yield no distance/cosine entry.
MIN_SEGMENT_MM = 1e-9

PairKey = tuple[int, int]
TripleKey = tuple[int, int, int]  # (i, j, k): angle at vertex j, i < k


def soft_mass(p: ProbVolume, c: int) -> float:
    """Total probability mass of class c, in voxels."""
    return float(p.data[c].sum())


def soft_volume(p: ProbVolume, c: int) -> float:
    """Soft volume of class c in mm^3."""
    return soft_mass(p, c) * p.voxel_volume


def soft_centroid(p: ProbVolume, c: int, mass_epsilon: float = MASS_EPSILON) -> np.ndarray:
    """Probability-weighted mean world coordinate of class c (mm)."""
    mass = soft_mass(p, c)
    if mass < mass_epsilon:
        raise VanishingMass(f"class {c} has soft mass {mass:g} < {mass_epsilon:g}")
    coords = p.world_coordinates()
    w = p.data[c]
    return np.array([(coords[a] * w).sum() for a in range(3)]) / mass


def soft_second_moment(p: ProbVolume, c: int, mass_epsilon: float = MASS_EPSILON) -> np.ndarray:
    """Central second moment matrix (3x3, mm^2) of class c."""
    mass = soft_mass(p, c)
    if mass < mass_epsilon:
        raise VanishingMass(f"class {c} has soft mass {mass:g} < {mass_epsilon:g}")
    coords = p.world_coordinates()
    w = p.data[c]
    m = np.array([(coords[a] * w).sum() for a in range(3)]) / mass
    d = coords - m[:, None, None, None]
    M = np.empty((3, 3))
    for a in range(3):
        for b in range(a, 3):
            M[a, b] = M[b, a] = (w * d[a] * d[b]).sum() / mass
    return M


def relations(
    centroids: np.ndarray, present: np.ndarray, min_segment_mm: float = MIN_SEGMENT_MM
) -> tuple[dict[PairKey, float], dict[TripleKey, float]]:
    """Pairwise distances and vertex cosines of a centroid constellation.

    ``centroids`` has one row per foreground class (class ids 1..7 map to
    rows 0..6); keys in the returned maps use class ids. Pairs need both
    endpoints present; triples (i, j, k) with vertex j and i < k need all
    three. Entries whose segments are shorter than ``min_segment_mm`` are
    omitted rather than reported as degenerate values.
    """
    ids = [c for c in FOREGROUND_CLASSES if present[c - 1]]
    pts = {c: np.asarray(centroids[c - 1], dtype=np.float64) for c in ids}
    pair_distance: dict[PairKey, float] = {}
    for ii, i in enumerate(ids):
        for j in ids[ii + 1:]:
            d = float(np.linalg.norm(pts[i] - pts[j]))
            if d >= min_segment_mm:
                pair_distance[(i, j)] = d
    triple_cosine: dict[TripleKey, float] = {}
    for j in ids:
        others = [c for c in ids if c != j]
        for ii, i in enumerate(others):
            for k in others[ii + 1:]:
                u = pts[i] - pts[j]
                v = pts[k] - pts[j]
                nu = float(np.linalg.norm(u))
                nv = float(np.linalg.norm(v))
                if nu < min_segment_mm or nv < min_segment_mm:
                    continue
                triple_cosine[(i, j, k)] = float(np.dot(u, v) / (nu * nv))
    return pair_distance, triple_cosine


@dataclass(frozen=True)
class CaseDescriptor:
    """Soft shape descriptors of one case. Classes below the mass floor are absent."""

    soft_volume: np.ndarray  # (8,) mm^3, nan where absent
    soft_centroid: np.ndarray  # (8, 3) mm, nan where absent
    second_moment: np.ndarray  # (8, 3, 3) mm^2, nan where absent
    present: np.ndarray  # (8,) bool
    pair_distance: dict[PairKey, float] = field(default_factory=dict)
    triple_cosine: dict[TripleKey, float] = field(default_factory=dict)


def case_descriptor(p: ProbVolume, mass_epsilon: float = MASS_EPSILON) -> CaseDescriptor:
    """Extract all soft descriptors of one probability volume."""
    vols = np.full(N_CLASSES, np.nan)
    cents = np.full((N_CLASSES, 3), np.nan)
    moms = np.full((N_CLASSES, 3, 3), np.nan)
    present = np.zeros(N_CLASSES, dtype=bool)
    coords = p.world_coordinates()
    for c in FOREGROUND_CLASSES:
        w = p.data[c]
        mass = float(w.sum())
        if mass < mass_epsilon:
            continue
        present[c] = True
        vols[c] = mass * p.voxel_volume
        m = np.array([(coords[a] * w).sum() for a in range(3)]) / mass
        cents[c] = m
        d = coords - m[:, None, None, None]
        for a in range(3):
            for b in range(a, 3):
                moms[c, a, b] = moms[c, b, a] = (w * d[a] * d[b]).sum() / mass
    pair_d, triple_c = relations(cents[1:], present[1:])
    return CaseDescriptor(vols, cents, moms, present, pair_d, triple_c)


@dataclass(frozen=True)
class ShapeStats:
    """Population statistics parameterizing the shape-aware losses.

    Arrays are indexed by class id; entries for classes never observed are
    nan with n = 0. Stds are population (divide-by-n) values.
    """

    volume_mean: np.ndarray  # (8,)
    volume_std: np.ndarray  # (8,)
    centroid_mean: np.ndarray  # (8, 3)
    second_moment_mean: np.ndarray  # (8, 3, 3)
    class_n: np.ndarray  # (8,) int
    pair_stats: dict[PairKey, tuple[float, float, int]]  # mean, std, n
    triple_stats: dict[TripleKey, tuple[float, float, int]]  # cos mean, std, n
    n_cases: int

    def class_usable(self, c: int) -> bool:
        return int(self.class_n[c]) >= 1


def aggregate(descriptors: list[CaseDescriptor]) -> ShapeStats:
    """Means and population stds per quantity over the cases where it is present."""
    if not descriptors:
        raise ValueError("need at least one case descriptor")
    vol_mean = np.full(N_CLASSES, np.nan)
    vol_std = np.full(N_CLASSES, np.nan)
    cent_mean = np.full((N_CLASSES, 3), np.nan)
    mom_mean = np.full((N_CLASSES, 3, 3), np.nan)
    class_n = np.zeros(N_CLASSES, dtype=np.int64)
    for c in FOREGROUND_CLASSES:
        have = [d for d in descriptors if d.present[c]]
        class_n[c] = len(have)
        if not have:
            continue
        vols = np.array([d.soft_volume[c] for d in have])
        vol_mean[c] = vols.mean()
        vol_std[c] = vols.std()  # population (divide-by-n)
        cent_mean[c] = np.mean([d.soft_centroid[c] for d in have], axis=0)
        mom_mean[c] = np.mean([d.second_moment[c] for d in have], axis=0)

    def _collect(key_of) -> dict:
        keys = sorted({k for d in descriptors for k in key_of(d)})
        out = {}
        for k in keys:
            vals = np.array([key_of(d)[k] for d in descriptors if k in key_of(d)])
            out[k] = (float(vals.mean()), float(vals.std()), int(vals.size))
        return out

    return ShapeStats(
        volume_mean=vol_mean,
        volume_std=vol_std,
        centroid_mean=cent_mean,
        second_moment_mean=mom_mean,
        class_n=class_n,
        pair_stats=_collect(lambda d: d.pair_distance),
        triple_stats=_collect(lambda d: d.triple_cosine),
        n_cases=len(descriptors),
    )


def save_stats(stats: ShapeStats, path: str | os.PathLike) -> None:
    """Serialize to the versioned stats.json schema (class names included)."""
    doc = {
        "version": __version__,
        "schema": "shape-stats/1",
        "n_cases": stats.n_cases,
        "classes": [
            {
                "id": c,
                "name": CLASS_NAMES[c],
                "n": int(stats.class_n[c]),
                "volume_mean": None if stats.class_n[c] == 0 else stats.volume_mean[c],
                "volume_std": None if stats.class_n[c] == 0 else stats.volume_std[c],
                "centroid_mean": None if stats.class_n[c] == 0 else stats.centroid_mean[c].tolist(),
                "second_moment_mean": (
                    None if stats.class_n[c] == 0 else stats.second_moment_mean[c].ravel().tolist()
                ),
            }
            for c in FOREGROUND_CLASSES
        ],
        "pairs": [
            {"pair": list(k), "mean": m, "std": s, "n": n}
            for k, (m, s, n) in sorted(stats.pair_stats.items())
        ],
        "triples": [
            {"triple": list(k), "cos_mean": m, "cos_std": s, "n": n}
            for k, (m, s, n) in sorted(stats.triple_stats.items())
        ],
    }
    with open(os.fspath(path), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_stats(path: str | os.PathLike) -> ShapeStats:
    with open(os.fspath(path), "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("schema") != "shape-stats/1":
        raise ValueError(f"unrecognized stats schema in {path}")
    vol_mean = np.full(N_CLASSES, np.nan)
    vol_std = np.full(N_CLASSES, np.nan)
    cent_mean = np.full((N_CLASSES, 3), np.nan)
    mom_mean = np.full((N_CLASSES, 3, 3), np.nan)
    class_n = np.zeros(N_CLASSES, dtype=np.int64)
    for entry in doc["classes"]:
        c = int(entry["id"])
        if CLASS_NAMES[c] != entry["name"]:
            raise ValueError(f"class name mismatch for id {c}: {entry['name']!r}")
        class_n[c] = entry["n"]
        if entry["n"] == 0:
            continue
        vol_mean[c] = entry["volume_mean"]
        vol_std[c] = entry["volume_std"]
        cent_mean[c] = entry["centroid_mean"]
        mom_mean[c] = np.asarray(entry["second_moment_mean"]).reshape(3, 3)
    pair_stats = {
        tuple(e["pair"]): (e["mean"], e["std"], e["n"]) for e in doc["pairs"]
    }
    triple_stats = {
        tuple(e["triple"]): (e["cos_mean"], e["cos_std"], e["n"]) for e in doc["triples"]
    }
    return ShapeStats(
        vol_mean, vol_std, cent_mean, mom_mean, class_n,
        pair_stats, triple_stats, doc["n_cases"],
    )
