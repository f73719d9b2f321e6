"""Deterministic synthetic heart phantoms.

Seven analytic compartments (ellipsoids and capsules) sit in a fixed
canonical constellation: two ventricles, two atria, a myocardium shell
around the LV, and two vessel tubes leaving the base. Each case applies a
whole-heart rigid pose (rotation about the origin, translation, global
scale) plus small per-compartment axis variations, drawn from a
counter-based RNG keyed on (seed, case_index) so parallel generation
cannot change results.

Geometry is implicit and evaluated at voxel centers, so ground-truth
volumes, centroids, and moments have closed forms; ``canonical_volumes``
exposes them for sanity checks against the voxelized statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DegenerateSpec, InvalidLabelValue, UnknownMode
from .preprocess import FovSpec
from .volume import FOREGROUND_CLASSES, N_CLASSES, Volume3, voxel_center_grid


@dataclass(frozen=True)
class _Ellipsoid:
    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]

    def max_radius(self) -> float:
        return float(np.linalg.norm(self.center) + max(self.semi_axes))

    def volume(self) -> float:
        a, b, c = self.semi_axes
        return 4.0 / 3.0 * np.pi * a * b * c

    def contains(self, y: np.ndarray, axis_factor: np.ndarray) -> np.ndarray:
        ax = np.asarray(self.semi_axes) * axis_factor
        q = sum(((y[a] - self.center[a]) / ax[a]) ** 2 for a in range(3))
        return q <= 1.0


@dataclass(frozen=True)
class _Capsule:
    p0: tuple[float, float, float]
    p1: tuple[float, float, float]
    radius: float

    def max_radius(self) -> float:
        ends = max(float(np.linalg.norm(self.p0)), float(np.linalg.norm(self.p1)))
        return ends + self.radius

    def volume(self) -> float:
        length = float(np.linalg.norm(np.subtract(self.p1, self.p0)))
        r = self.radius
        return np.pi * r * r * length + 4.0 / 3.0 * np.pi * r ** 3

    def contains(self, y: np.ndarray, axis_factor: np.ndarray) -> np.ndarray:
        # only the radius varies; endpoints are part of the constellation
        r = self.radius * float(axis_factor[0])
        p0 = np.asarray(self.p0)
        d = np.subtract(self.p1, self.p0)
        w = y - p0[:, None, None, None]
        t = np.clip(np.tensordot(d, w, axes=(0, 0)) / float(d @ d), 0.0, 1.0)
        closest = p0[:, None, None, None] + d[:, None, None, None] * t
        dist2 = ((y - closest) ** 2).sum(axis=0)
        return dist2 <= r * r


#: Canonical compartments in label-assignment (priority) order. The LV is
#: written before the myocardium so the shell is exactly outer minus LV.
#: Centers are deliberately off the voxel-center lattice of the default
#: 48^3 / 2 mm grid; integer-mm placements align surfaces with sampling
#: planes and bias voxelized volumes by several percent.
_ASSIGNMENT: tuple[tuple[int, object], ...] = (
    (1, _Ellipsoid((-12.18, 0.41, -13.42), (10.5, 10.5, 14.5))),   # LV
    (5, _Ellipsoid((-12.18, 0.41, -13.42), (14.5, 14.5, 18.5))),   # myocardium (shell)
    (2, _Ellipsoid((16.23, 0.27, -13.52), (9.5, 10.5, 13.5))),     # RV
    (3, _Ellipsoid((-12.32, -0.2, 17.88), (8.7, 8.1, 8.3))),       # LA
    (4, _Ellipsoid((13.47, 1.22, 18.25), (8.3, 8.1, 8.3))),        # RA
    (6, _Capsule((-4.25, 16.53, 6.59), (-2.05, 16.53, 27.49), 5.7)),  # ascending aorta
    (7, _Capsule((9.85, -16.41, 8.33), (3.65, -16.41, 29.03), 5.1)),  # pulmonary artery
)

#: Pseudo-CT base intensity per class id (background first).
BASE_INTENSITY = (40.0, 320.0, 300.0, 310.0, 290.0, 120.0, 330.0, 280.0)


def canonical_compartments() -> dict[int, object]:
    """Class id -> analytic shape of the canonical (zero-jitter) phantom."""
    return {cid: shape for cid, shape in _ASSIGNMENT}


def canonical_volumes() -> dict[int, float]:
    """Closed-form compartment volumes (mm^3); the shell subtracts the LV."""
    shapes = canonical_compartments()
    vols = {cid: shape.volume() for cid, shape in shapes.items()}
    vols[5] = shapes[5].volume() - shapes[1].volume()
    return vols


@dataclass(frozen=True)
class Jitter:
    pose_rotation_max_deg: float = 10.0
    translation_max_mm: float = 4.0
    scale_range: tuple[float, float] = (0.95, 1.05)
    axis_variation: float = 0.06

    def __post_init__(self) -> None:
        lo, hi = (float(s) for s in self.scale_range)
        if not (0.0 < lo <= hi):
            raise ValueError(f"scale_range must be a positive interval, got {self.scale_range}")
        object.__setattr__(self, "scale_range", (lo, hi))
        if not 0.0 <= self.axis_variation < 0.5:
            raise ValueError(f"axis_variation must be in [0, 0.5), got {self.axis_variation}")
        if not 0.0 <= self.pose_rotation_max_deg <= 45.0:
            raise ValueError(
                f"pose_rotation_max_deg must be in [0, 45], got {self.pose_rotation_max_deg}"
            )
        if self.translation_max_mm < 0.0:
            raise ValueError("translation_max_mm must be >= 0")

    @staticmethod
    def none() -> "Jitter":
        return Jitter(0.0, 0.0, (1.0, 1.0), 0.0)


def _default_grid() -> FovSpec:
    return FovSpec((48, 48, 48), 2.0)


@dataclass(frozen=True)
class PhantomSpec:
    grid: FovSpec = field(default_factory=_default_grid)
    seed: int = 0
    jitter: Jitter = field(default_factory=Jitter)
    noise_sigma: float = 12.0

    def __post_init__(self) -> None:
        if self.noise_sigma < 0.0:
            raise ValueError("noise_sigma must be >= 0")


def _rotation_matrix(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    n = float(np.linalg.norm(axis))
    u = axis / n if n > 1e-12 else np.array([0.0, 0.0, 1.0])
    K = np.array([[0.0, -u[2], u[1]], [u[2], 0.0, -u[0]], [-u[1], u[0], 0.0]])
    return np.eye(3) + np.sin(angle_rad) * K + (1.0 - np.cos(angle_rad)) * (K @ K)


def _check_fit(spec: PhantomSpec) -> None:
    r0 = max(shape.max_radius() for _, shape in _ASSIGNMENT)
    worst = (
        r0 * spec.jitter.scale_range[1] * (1.0 + spec.jitter.axis_variation)
        + spec.jitter.translation_max_mm
    )
    half_extent = min(spec.grid.spacing_mm * n / 2.0 for n in spec.grid.grid_size)
    if worst > half_extent:
        raise DegenerateSpec(
            f"compartments reach {worst:.1f} mm from the origin but the grid "
            f"half-extent is only {half_extent:.1f} mm"
        )


def generate(spec: PhantomSpec, case_index: int) -> tuple[Volume3, Volume3]:
    """One phantom case: (pseudo-CT image Float32, labels UInt8).

    Pure function of (spec, case_index); the RNG is Philox keyed on
    (seed, case_index) with a fixed draw order (rotation axis, angle,
    translation, scale, per-compartment axis factors, image noise).
    """
    _check_fit(spec)
    rng = np.random.Generator(
        np.random.Philox(key=np.array([spec.seed, case_index], dtype=np.uint64))
    )
    axis = rng.standard_normal(3)
    angle = np.deg2rad(rng.uniform(-spec.jitter.pose_rotation_max_deg,
                                   spec.jitter.pose_rotation_max_deg))
    translation = rng.uniform(-spec.jitter.translation_max_mm,
                              spec.jitter.translation_max_mm, size=3)
    scale = rng.uniform(*spec.jitter.scale_range)
    axis_factors = 1.0 + spec.jitter.axis_variation * rng.uniform(-1.0, 1.0,
                                                                  size=(len(_ASSIGNMENT), 3))
    R = _rotation_matrix(axis, angle)

    offset = spec.grid.origin_centered_offset()
    x = voxel_center_grid(spec.grid.grid_size, spec.grid.spacing, offset)
    # canonical coordinates of each voxel center: y = R^T (x - t) / s
    shifted = x - np.asarray(translation)[:, None, None, None]
    y = np.tensordot(R.T, shifted, axes=(1, 0)) / scale

    labels = np.zeros(spec.grid.grid_size, dtype=np.uint8)
    for row, (cid, shape) in enumerate(_ASSIGNMENT):
        inside = shape.contains(y, axis_factors[row]) & (labels == 0)
        labels[inside] = cid

    base = np.asarray(BASE_INTENSITY)[labels]
    noise = rng.standard_normal(spec.grid.grid_size) * spec.noise_sigma
    image = (base + noise).astype(np.float32)
    sp = spec.grid.spacing
    return Volume3(image, sp, offset), Volume3(labels, sp, offset)


_STRUCT6 = ndimage.generate_binary_structure(3, 1)


def degrade(labels: Volume3, mode: str, magnitude, seed: int = 0) -> Volume3:
    """Deterministic label corruption for metric and loss testing.

    magnitude means: erode/dilate -> iterations (int >= 0); drop_class ->
    the class id to erase; swap_boundary -> fraction of boundary voxels
    reassigned to a random differing neighbor's label (seeded).
    """
    out = labels.data.copy()
    if mode == "erode":
        it = int(magnitude)
        if it > 0:
            for c in FOREGROUND_CLASSES:
                m = labels.data == c
                if m.any():
                    kept = ndimage.binary_erosion(m, _STRUCT6, iterations=it)
                    out[m & ~kept] = 0
    elif mode == "dilate":
        it = int(magnitude)
        if it > 0:
            for c in FOREGROUND_CLASSES:
                m = labels.data == c
                if m.any():
                    grown = ndimage.binary_dilation(m, _STRUCT6, iterations=it)
                    out[grown & (out == 0)] = c
    elif mode == "drop_class":
        cid = int(magnitude)
        if cid not in FOREGROUND_CLASSES:
            raise InvalidLabelValue(f"drop_class needs a foreground class id, got {magnitude}")
        out[out == cid] = 0
    elif mode == "swap_boundary":
        frac = float(magnitude)
        if not 0.0 <= frac <= 1.0:
            raise ValueError(f"swap_boundary fraction must be in [0, 1], got {magnitude}")
        src = labels.data
        shifts = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))
        boundary = np.zeros(src.shape, dtype=bool)
        boundary[1:] |= src[1:] != src[:-1]
        boundary[:-1] |= src[:-1] != src[1:]
        boundary[:, 1:] |= src[:, 1:] != src[:, :-1]
        boundary[:, :-1] |= src[:, :-1] != src[:, 1:]
        boundary[:, :, 1:] |= src[:, :, 1:] != src[:, :, :-1]
        boundary[:, :, :-1] |= src[:, :, :-1] != src[:, :, 1:]
        idx = np.argwhere(boundary)
        k = int(round(frac * idx.shape[0]))
        if k > 0:
            rng = np.random.default_rng(seed)
            chosen = idx[rng.choice(idx.shape[0], size=k, replace=False)]
            dims = src.shape
            for i, j, l in chosen:
                cands = []
                for dx, dy, dz in shifts:
                    ni, nj, nl = i + dx, j + dy, l + dz
                    if 0 <= ni < dims[0] and 0 <= nj < dims[1] and 0 <= nl < dims[2]:
                        v = src[ni, nj, nl]
                        if v != src[i, j, l]:
                            cands.append(v)
                if cands:
                    out[i, j, l] = cands[int(rng.integers(len(cands)))]
    else:
        raise UnknownMode(f"unknown degrade mode {mode!r}")
    return Volume3(out, labels.spacing, labels.offset)
