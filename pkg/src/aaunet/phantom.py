"""Synthetic head-phantom renderer.

Each case is an elliptical "skull" ring around a textured "brain" interior,
sliced into a short stack.  Lesions are analytic regions whose masks exactly
delimit their rendered pixels:

* ICH: irregular bright blob in the brain interior.
* SDH: bright crescent hugging the inner skull boundary.
* EDH: bright biconvex lens at the same boundary locus, with the same
  intensity and texture as SDH, so only the shape separates the two.
* SAH: thin bright ribbons along interior curves.
* CSDH: thicker crescent of lower intensity with internal texture.
* Pneumocranium: dark speckles whose total per-slice area is drawn uniformly
  from [15, 86] pixels at 512 scale, scaled by (size/512)^2 with a 4-pixel
  floor at smaller scales.
* IVH: bright blob confined to the central ventricle zone.

A lesion persists over a contiguous slice range and deforms smoothly: size
ramps with a sine profile and the anchor angle drifts slowly.  Everything is
a pure function of (seed, size, recipe).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from scipy import ndimage

from .errors import GenerationError


class LesionClass(IntEnum):
    ICH = 1
    SDH = 2
    SAH = 3
    EDH = 4
    CSDH = 5
    PNEUMOCRANIUM = 6
    IVH = 7


# render order: boundary collections first, speckles last (they fill free pixels)
_RENDER_ORDER = (LesionClass.SDH, LesionClass.EDH, LesionClass.CSDH, LesionClass.ICH,
                 LesionClass.IVH, LesionClass.SAH, LesionClass.PNEUMOCRANIUM)

_INTENSITY = {
    LesionClass.ICH: 0.78,
    LesionClass.SDH: 0.80,
    LesionClass.EDH: 0.80,
    LesionClass.SAH: 0.72,
    LesionClass.CSDH: 0.55,
    LesionClass.PNEUMOCRANIUM: 0.03,
    LesionClass.IVH: 0.75,
}

_TEXTURE_AMP = {
    LesionClass.ICH: 0.02,
    LesionClass.SDH: 0.02,
    LesionClass.EDH: 0.02,
    LesionClass.SAH: 0.01,
    LesionClass.CSDH: 0.05,
    LesionClass.PNEUMOCRANIUM: 0.0,
    LesionClass.IVH: 0.02,
}

PNEUMO_AREA_RANGE_512 = (15, 86)
PNEUMO_AREA_FLOOR = 4
LESION_FREE_FRACTION = 0.4655

_BRAIN_RHO = 0.92
_LESION_R_OUT = 0.90
# fraction of a new lesion allowed to collide with already-rendered ones
_MAX_OVERLAP = 0.15


@dataclass
class LesionSpec:
    lesion: LesionClass
    start: int
    stop: int  # exclusive
    angle: float | None = None
    seed: int | None = None

    def to_dict(self):
        return {"lesion": int(self.lesion), "start": self.start, "stop": self.stop,
                "angle": self.angle, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        return cls(lesion=LesionClass(d["lesion"]), start=d["start"], stop=d["stop"],
                   angle=d.get("angle"), seed=d.get("seed"))


@dataclass
class CaseRecipe:
    n_slices: int
    lesions: list = field(default_factory=list)

    def to_dict(self):
        return {"n_slices": self.n_slices, "lesions": [s.to_dict() for s in self.lesions]}

    @classmethod
    def from_dict(cls, d):
        return cls(n_slices=d["n_slices"],
                   lesions=[LesionSpec.from_dict(s) for s in d["lesions"]])


@dataclass
class PhantomCase:
    patient_id: str
    images: list          # H x W float32 in [0, 1]
    masks: list           # H x W uint8, classes 0..7
    seed: int
    size: int
    recipe: CaseRecipe    # resolved: every event carries its angle and seed

    @property
    def n_slices(self):
        return len(self.images)

    def slice_classes(self, index):
        """Lesion inventory of one slice."""
        present = np.unique(self.masks[index])
        return sorted(int(c) for c in present if c != 0)


def smooth_noise(rng, size, coarse=8, amp=1.0):
    """Low-frequency noise: a coarse normal grid bilinearly zoomed to size."""
    grid = rng.standard_normal((coarse, coarse))
    return ndimage.zoom(grid, size / coarse, order=1, mode="nearest") * amp


class _SliceGeometry:
    """Head geometry for one slice: elliptical radius, angle, region masks."""

    def __init__(self, size, cx, cy, a_px, b_px):
        self.size = size
        self.cx, self.cy = cx, cy
        self.a_px, self.b_px = a_px, b_px
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        self.yy, self.xx = yy, xx
        self.rho = np.sqrt(((xx - cx) / a_px) ** 2 + ((yy - cy) / b_px) ** 2)
        self.theta = np.arctan2((yy - cy) / b_px, (xx - cx) / a_px)
        self.brain = self.rho < _BRAIN_RHO
        self.skull = (self.rho >= _BRAIN_RHO) & (self.rho <= 1.02)
        self.ventricle = self.rho < 0.17

    def local_radius(self, theta0):
        """Distance (px) from the center to the rho=1 boundary at angle theta0."""
        return 1.0 / math.sqrt((math.cos(theta0) / self.a_px) ** 2 +
                               (math.sin(theta0) / self.b_px) ** 2)

    def boundary_point(self, theta0, rho=1.0):
        return (self.cx + rho * self.a_px * math.cos(theta0),
                self.cy + rho * self.b_px * math.sin(theta0))

    def pixel_dist(self, px, py):
        return np.sqrt((self.xx - px) ** 2 + (self.yy - py) ** 2)


def _wrap_angle(delta):
    return (delta + np.pi) % (2 * np.pi) - np.pi


def _crescent_mask(geo, theta0, span, t_px):
    """Meniscus between the inner skull boundary and a tapered inward offset."""
    r_loc = geo.local_radius(theta0) * _LESION_R_OUT
    t_rho = max(t_px, 2.0) / r_loc
    dtheta = _wrap_angle(geo.theta - theta0)
    inside = np.abs(dtheta) < span / 2
    taper = np.cos(np.pi * dtheta / span, where=inside, out=np.zeros_like(dtheta))
    depth = t_rho * np.clip(taper, 0.0, 1.0)
    return inside & (geo.rho <= _LESION_R_OUT) & (geo.rho >= _LESION_R_OUT - depth)


def _lens_mask(geo, theta0, span, t_px):
    """Biconvex lens against the inner skull boundary (convex by construction)."""
    t_px = max(t_px, 2.0)
    r_loc = geo.local_radius(theta0)
    half_chord = max(0.36 * span * r_loc * _LESION_R_OUT, 3.0)
    radius = (half_chord ** 2 + t_px ** 2) / (2.0 * t_px)
    px, py = geo.boundary_point(theta0, rho=_LESION_R_OUT)
    nx = math.cos(theta0) / geo.a_px
    ny = math.sin(theta0) / geo.b_px
    norm = math.hypot(nx, ny)
    nx, ny = nx / norm, ny / norm
    cx = px + nx * (radius - t_px)
    cy = py + ny * (radius - t_px)
    return (geo.pixel_dist(cx, cy) <= radius) & (geo.rho <= _LESION_R_OUT)


def _blob_mask(geo, px, py, r_px, phases, clip=None):
    """Irregular blob: a disk whose radius wobbles with the local angle."""
    d = geo.pixel_dist(px, py)
    local = np.arctan2(geo.yy - py, geo.xx - px)
    wobble = 1.0 + 0.30 * np.sin(2 * local + phases[0]) + 0.18 * np.sin(3 * local + phases[1])
    region = d <= r_px * np.clip(wobble, 0.35, None)
    region &= geo.brain if clip is None else clip
    return region


def _ribbon_mask(geo, arcs):
    """Union of thin sinuous arcs; each arc is (rho0, theta0, window, thickness_rho, wave_phase)."""
    out = np.zeros_like(geo.rho, dtype=bool)
    for rho0, theta0, window, t_rho, phase in arcs:
        dtheta = _wrap_angle(geo.theta - theta0)
        center = rho0 + 0.04 * np.sin(3 * geo.theta + phase)
        out |= (np.abs(dtheta) < window / 2) & (np.abs(geo.rho - center) <= t_rho / 2)
    return out & geo.brain


def _nearest_free_pixels(geo, free, px, py, count):
    """The ``count`` free pixels nearest to (px, py), deterministic tie-break."""
    ys, xs = np.nonzero(free)
    if len(ys) == 0:
        return np.zeros_like(free)
    d2 = (xs - px) ** 2 + (ys - py) ** 2
    order = np.lexsort((xs, ys, d2))[: min(count, len(ys))]
    out = np.zeros_like(free)
    out[ys[order], xs[order]] = True
    return out


def pneumo_slice_area(rng, size):
    """Per-slice speckle area: uniform [15, 86] px at 512 scale, (size/512)^2 scaled."""
    lo, hi = PNEUMO_AREA_RANGE_512
    base = rng.uniform(lo, hi)
    return max(PNEUMO_AREA_FLOOR, int(round(base * (size / 512.0) ** 2)))


class _Event:
    """A lesion spec with all randomness resolved to concrete parameters."""

    def __init__(self, spec: LesionSpec, size: int):
        self.spec = spec
        self.lesion = spec.lesion
        rng = np.random.default_rng(spec.seed)
        self.angle = spec.angle
        self.drift = rng.uniform(-0.15, 0.15)
        self.span = rng.uniform(1.8, 2.6)
        self.t_px = rng.uniform(0.06, 0.10) * size
        self.rho_c = rng.uniform(0.30, 0.62)
        self.r_blob = rng.uniform(0.05, 0.11) * size
        self.phases = rng.uniform(0, 2 * np.pi, size=4)
        self.n_arcs = int(rng.integers(2, 4))
        self.arc_params = [
            (rng.uniform(0.35, 0.68), rng.uniform(-np.pi, np.pi),
             rng.uniform(0.6, 1.3), rng.uniform(0, 2 * np.pi))
            for _ in range(self.n_arcs)
        ]
        self.n_clusters = int(rng.integers(2, 5))
        self.cluster_angles = rng.uniform(-np.pi, np.pi, size=self.n_clusters)
        self.cluster_rhos = rng.uniform(0.55, 0.85, size=self.n_clusters)
        self.ivh_r = rng.uniform(0.035, 0.06) * size
        self.ivh_offset = rng.uniform(-0.07, 0.07, size=2)
        self.seed = spec.seed

    def profile(self, s):
        """Smooth grow-and-shrink size factor over the event's slice range."""
        length = self.spec.stop - self.spec.start
        u = (s - self.spec.start + 0.5) / length
        return 0.55 + 0.45 * math.sin(math.pi * u) ** 0.8

    def angle_at(self, s):
        length = max(self.spec.stop - self.spec.start, 1)
        mid = (self.spec.start + self.spec.stop - 1) / 2
        return self.angle + self.drift * (s - mid) / length

    def render(self, geo, s, free, image_shape_rng):
        """Boolean candidate mask for slice ``s`` (before overlap carving)."""
        p = self.profile(s)
        kind = self.lesion
        if kind == LesionClass.SDH:
            return _crescent_mask(geo, self.angle_at(s), self.span * p, self.t_px * p)
        if kind == LesionClass.CSDH:
            return _crescent_mask(geo, self.angle_at(s), self.span * p, 1.35 * self.t_px * p)
        if kind == LesionClass.EDH:
            return _lens_mask(geo, self.angle_at(s), self.span * p, 0.49 * self.t_px * p)
        if kind == LesionClass.ICH:
            px, py = geo.boundary_point(self.angle_at(s), rho=self.rho_c)
            # keep parenchymal blobs clear of the central ventricle zone
            interior = (geo.rho < 0.85) & (geo.rho > 0.22)
            return _blob_mask(geo, px, py, self.r_blob * p, self.phases, clip=interior)
        if kind == LesionClass.IVH:
            vx = geo.cx + self.ivh_offset[0] * geo.a_px
            vy = geo.cy + self.ivh_offset[1] * geo.b_px
            return _blob_mask(geo, vx, vy, self.ivh_r * p, self.phases[2:], clip=geo.ventricle)
        if kind == LesionClass.SAH:
            t_px = max(0.019 * geo.size, 1.6)
            arcs = [(rho0, theta0 + self.drift * (s - self.spec.start), w * p,
                     t_px / geo.local_radius(theta0), phase)
                    for rho0, theta0, w, phase in self.arc_params]
            return _ribbon_mask(geo, arcs)
        if kind == LesionClass.PNEUMOCRANIUM:
            area = pneumo_slice_area(image_shape_rng, geo.size)
            parts = np.full(self.n_clusters, area // self.n_clusters)
            parts[: area % self.n_clusters] += 1
            out = np.zeros_like(free)
            for k in range(self.n_clusters):
                if parts[k] == 0:
                    continue
                px, py = geo.boundary_point(self.cluster_angles[k], rho=self.cluster_rhos[k])
                out |= _nearest_free_pixels(geo, free & ~out, px, py, int(parts[k]))
            return out
        raise GenerationError(f"unknown lesion class {kind}")


def resolve_recipe(seed: int, recipe: CaseRecipe) -> CaseRecipe:
    """Fill in every unresolved angle/seed; the master draw sequence is fixed,
    so re-resolving an already resolved recipe is a no-op."""
    master = np.random.default_rng(seed)
    resolved = []
    for spec in recipe.lesions:
        ev_seed = int(master.integers(2 ** 62))
        ev_angle = float(master.uniform(-np.pi, np.pi))
        resolved.append(LesionSpec(
            lesion=spec.lesion, start=spec.start, stop=spec.stop,
            angle=spec.angle if spec.angle is not None else ev_angle,
            seed=spec.seed if spec.seed is not None else ev_seed,
        ))
    return CaseRecipe(n_slices=recipe.n_slices, lesions=resolved)


def generate_phantom_case(seed: int, size: int, recipe: CaseRecipe,
                          patient_id: str = "case_000") -> PhantomCase:
    """Render a full case; bit-deterministic in (seed, size, recipe)."""
    if size % 32 != 0:
        raise GenerationError(f"phantom size must be divisible by 32, got {size}")
    n = recipe.n_slices
    for spec in recipe.lesions:
        if not (0 <= spec.start < spec.stop <= n):
            raise GenerationError(
                f"lesion {spec.lesion.name}: slice range [{spec.start}, {spec.stop}) "
                f"outside case of {n} slices"
            )
    recipe = resolve_recipe(seed, recipe)
    case_rng = np.random.default_rng([seed, 1])
    noise_seed = int(case_rng.integers(2 ** 62))
    cx = (size - 1) / 2 + case_rng.uniform(-0.01, 0.01) * size
    cy = (size - 1) / 2 + case_rng.uniform(-0.01, 0.01) * size
    a_rel = case_rng.uniform(0.42, 0.45)
    b_rel = case_rng.uniform(0.45, 0.48)

    events = [_Event(spec, size) for spec in recipe.lesions]
    images, masks = [], []
    for s in range(n):
        scale = 0.97 + 0.03 * math.sin(math.pi * (s + 1) / (n + 1))
        geo = _SliceGeometry(size, cx, cy, a_rel * size * scale, b_rel * size * scale)
        slice_rng = np.random.default_rng([noise_seed, s])
        img = np.full((size, size), 0.02)
        img[geo.skull] = 0.95
        brain_tex = 0.34 + smooth_noise(slice_rng, size, amp=0.04)
        img[geo.brain] = brain_tex[geo.brain]
        img[geo.ventricle] = 0.24 + 0.02 * smooth_noise(slice_rng, size, coarse=4)[geo.ventricle]
        mask = np.zeros((size, size), dtype=np.uint8)

        active = [ev for ev in events if ev.spec.start <= s < ev.spec.stop]
        active.sort(key=lambda ev: _RENDER_ORDER.index(ev.lesion))
        boundary = (int(LesionClass.SDH), int(LesionClass.EDH), int(LesionClass.CSDH))
        for ev in active:
            ev_slice_rng = np.random.default_rng([ev.seed, s])
            free = geo.brain & (mask == 0)
            cand = ev.render(geo, s, free, ev_slice_rng)
            n_cand = int(cand.sum())
            if int(ev.lesion) in boundary and n_cand > 0:
                # crescents and lenses share the inner-skull locus: a recipe
                # that stacks two of them on the same site is impossible
                clash = cand & np.isin(mask, boundary)
                if int(clash.sum()) > _MAX_OVERLAP * n_cand:
                    raise GenerationError(
                        f"overlapping exclusive lesions: {ev.lesion.name} collides with "
                        f"another boundary lesion on slice {s} of {patient_id}"
                    )
            cand &= mask == 0
            if not cand.any():
                # guarantee at least a minimal footprint at the intended locus
                if ev.lesion in (LesionClass.SDH, LesionClass.EDH, LesionClass.CSDH):
                    px, py = geo.boundary_point(ev.angle_at(s), rho=0.85)
                else:
                    px, py = geo.cx, geo.cy
                cand = _nearest_free_pixels(geo, free, px, py, 4)
                if not cand.any():
                    raise GenerationError(
                        f"no free pixels left for {ev.lesion.name} on slice {s} of {patient_id}"
                    )
            tex = smooth_noise(ev_slice_rng, size, coarse=4, amp=_TEXTURE_AMP[ev.lesion])
            img[cand] = _INTENSITY[ev.lesion] + tex[cand]
            mask[cand] = int(ev.lesion)

        images.append(np.clip(img, 0.0, 1.0).astype(np.float32))
        masks.append(mask)
    return PhantomCase(patient_id=patient_id, images=images, masks=masks,
                       seed=seed, size=size, recipe=recipe)
