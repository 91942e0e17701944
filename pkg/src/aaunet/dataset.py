"""Dataset assembly and I/O: patient-level splits, class coverage planning,
PNG persistence, 3-slice input stacking and the augmentation suite.

On-disk layout::

    <root>/manifest.json
    <root>/cases/<patient_id>/img_<idx>.png    16-bit grayscale, round(v * 65535)
    <root>/cases/<patient_id>/mask_<idx>.png   8-bit class indices 0..7
    <root>/cases/<patient_id>/meta.json        seed, size, resolved recipe

Split assignment is by patient: 78 / 7.5 / 14.5 percent of cases
(nearest-integer, at least one case per split), and every lesion class is
planted into every split so per-class evaluation is defined everywhere.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DataError, GenerationError
from .phantom import (CaseRecipe, LesionClass, LesionSpec, PhantomCase,
                      LESION_FREE_FRACTION, generate_phantom_case)

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = {"train": 0.78, "val": 0.075, "test": 0.145}


# ---------------------------------------------------------------------------
# Planning
# ---------------------------------------------------------------------------


def split_case_counts(n_cases: int):
    """Nearest-integer 78/7.5/14.5 split with at least one case per split."""
    n_train = int(round(n_cases * SPLIT_FRACTIONS["train"]))
    n_val = int(round(n_cases * SPLIT_FRACTIONS["val"]))
    n_train, n_val = max(n_train, 1), max(n_val, 1)
    n_test = n_cases - n_train - n_val
    while n_test < 1:
        n_train -= 1
        n_test += 1
    return n_train, n_val, n_test


@dataclass
class CasePlan:
    patient_id: str
    split: str
    seed: int
    recipe: CaseRecipe


def random_case_recipe(rng, n_slices: int, classes) -> CaseRecipe:
    """One contiguous active window sized so the lesion-free fraction matches
    the target; the window is tiled by the case's classes, with random
    overlap extensions so some slices carry several lesions."""
    classes = list(classes)
    free = int(round(LESION_FREE_FRACTION * n_slices))
    window = n_slices - free
    if window < len(classes):
        raise GenerationError(
            f"cannot fit {len(classes)} lesion classes into an active window of {window} slices"
        )
    start = int(rng.integers(0, free + 1))
    # composition of the window into len(classes) segments, each >= 1
    cuts = np.sort(rng.choice(np.arange(1, window), size=len(classes) - 1, replace=False)) \
        if len(classes) > 1 else np.array([], dtype=int)
    bounds = np.concatenate(([0], cuts, [window])) + start
    order = rng.permutation(len(classes))
    specs = []
    for k, ci in enumerate(order):
        seg_start, seg_stop = int(bounds[k]), int(bounds[k + 1])
        if rng.random() < 0.5:
            seg_stop = min(seg_stop + int(rng.integers(1, 3)), start + window)
        specs.append(LesionSpec(lesion=LesionClass(classes[ci]), start=seg_start, stop=seg_stop))
    _assign_boundary_angles(rng, specs)
    return CaseRecipe(n_slices=n_slices, lesions=specs)


def _assign_boundary_angles(rng, specs):
    """Boundary-hugging lesions in one case get well-separated anchor angles
    so concurrent crescents and lenses cannot collide."""
    boundary = [s for s in specs
                if s.lesion in (LesionClass.SDH, LesionClass.EDH, LesionClass.CSDH)]
    if not boundary:
        return
    base = float(rng.uniform(-np.pi, np.pi))
    step = 2 * np.pi / max(len(boundary), 2)
    for j, s in enumerate(boundary):
        s.angle = float(base + j * step + rng.uniform(-0.25, 0.25))


def plan_dataset(seed: int, n_cases: int, size: int):
    """Deterministic list of CasePlans covering every class in every split."""
    if n_cases < 7:
        raise GenerationError(f"need at least 7 cases to cover all lesion classes, got {n_cases}")
    if size % 32 != 0:
        raise GenerationError(f"size must be divisible by 32, got {size}")
    rng = np.random.default_rng([seed, 0])
    n_train, n_val, n_test = split_case_counts(n_cases)
    splits = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    order = rng.permutation(n_cases)
    assignment = {}
    for pos, case_idx in enumerate(order):
        assignment[int(case_idx)] = splits[pos]

    all_classes = [int(c) for c in LesionClass]
    by_split = {s: [i for i in range(n_cases) if assignment[i] == s] for s in SPLITS}
    class_sets = {i: set() for i in range(n_cases)}
    for s in SPLITS:
        members = by_split[s]
        for k, cls in enumerate(all_classes):
            class_sets[members[k % len(members)]].add(cls)
    for i in range(n_cases):
        want = int(rng.integers(2, 5))
        extras = rng.permutation(all_classes)
        for cls in extras:
            if len(class_sets[i]) >= want:
                break
            class_sets[i].add(int(cls))

    plans = []
    for i in range(n_cases):
        case_seed = int(rng.integers(2 ** 62))
        n_slices = int(rng.integers(30, 51))
        recipe = random_case_recipe(rng, n_slices, sorted(class_sets[i]))
        plans.append(CasePlan(patient_id=f"case_{i:03d}", split=assignment[i],
                              seed=case_seed, recipe=recipe))

    for s in SPLITS:
        covered = set()
        for p in plans:
            if p.split == s:
                covered |= {int(sp.lesion) for sp in p.recipe.lesions}
        if covered != set(all_classes):
            raise GenerationError(f"class coverage failure in split '{s}': missing "
                                  f"{set(all_classes) - covered}")
    return plans


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


@dataclass
class ManifestCase:
    patient_id: str
    split: str
    slices: list  # image paths relative to the dataset root

    def to_dict(self):
        return {"patient_id": self.patient_id, "split": self.split, "slices": self.slices}


@dataclass
class DatasetManifest:
    seed: int
    size: int
    fraction_lesion_free: float
    cases: list = field(default_factory=list)

    def split_cases(self, split):
        if split not in SPLITS:
            raise ConfigError(f"unknown split '{split}', expected one of {SPLITS}")
        return [c for c in self.cases if c.split == split]

    def to_dict(self):
        return {"seed": self.seed, "size": self.size,
                "fraction_lesion_free": self.fraction_lesion_free,
                "cases": [c.to_dict() for c in self.cases]}

    @classmethod
    def from_dict(cls, d):
        return cls(seed=d["seed"], size=d["size"],
                   fraction_lesion_free=d["fraction_lesion_free"],
                   cases=[ManifestCase(**c) for c in d["cases"]])


def _write_json(path: Path, payload):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def save_case(case: PhantomCase, case_dir) -> list:
    """Write a case directory; returns image paths relative to the directory."""
    case_dir = Path(case_dir)
    case_dir.mkdir(parents=True, exist_ok=True)
    rel_paths = []
    for i, (img, mask) in enumerate(zip(case.images, case.masks)):
        quant = np.rint(np.clip(img, 0.0, 1.0) * 65535.0).astype("<u2")
        Image.fromarray(quant, mode="I;16").save(case_dir / f"img_{i:03d}.png")
        Image.fromarray(mask.astype(np.uint8), mode="L").save(case_dir / f"mask_{i:03d}.png")
        rel_paths.append(f"img_{i:03d}.png")
    _write_json(case_dir / "meta.json", {
        "patient_id": case.patient_id,
        "seed": case.seed,
        "size": case.size,
        "n_slices": case.n_slices,
        "slice_order": rel_paths,
        "recipe": case.recipe.to_dict(),
        "lesion_inventory": [case.slice_classes(i) for i in range(case.n_slices)],
    })
    return rel_paths


def load_case(case_dir) -> PhantomCase:
    case_dir = Path(case_dir)
    meta_path = case_dir / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"case metadata not found: {meta_path}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    images, masks = [], []
    for i, rel in enumerate(meta["slice_order"]):
        img_path = case_dir / rel
        mask_path = case_dir / f"mask_{i:03d}.png"
        for p in (img_path, mask_path):
            if not p.exists():
                raise FileNotFoundError(f"case file not found: {p}")
        try:
            raw = np.asarray(Image.open(img_path), dtype=np.uint16)
            mask = np.asarray(Image.open(mask_path), dtype=np.uint8)
        except Exception as exc:  # PIL raises various things on corrupt files
            raise DataError(f"corrupt case file under {case_dir}: {exc}") from exc
        if mask.max(initial=0) > 7:
            raise DataError(f"mask class index > 7 in {mask_path}")
        images.append((raw.astype(np.float32) / 65535.0))
        masks.append(mask)
    return PhantomCase(patient_id=meta["patient_id"], images=images, masks=masks,
                       seed=meta["seed"], size=meta["size"],
                       recipe=CaseRecipe.from_dict(meta["recipe"]))


def generate_dataset(seed: int, n_cases: int, size: int, out_dir) -> DatasetManifest:
    """Plan, render and persist a dataset; returns (and writes) the manifest."""
    out_dir = Path(out_dir)
    plans = plan_dataset(seed, n_cases, size)
    cases = []
    total_slices = 0
    lesion_free = 0
    for plan in plans:
        case = generate_phantom_case(plan.seed, size, plan.recipe, patient_id=plan.patient_id)
        rels = save_case(case, out_dir / "cases" / plan.patient_id)
        total_slices += case.n_slices
        lesion_free += sum(1 for m in case.masks if not m.any())
        cases.append(ManifestCase(
            patient_id=plan.patient_id, split=plan.split,
            slices=[f"cases/{plan.patient_id}/{r}" for r in rels],
        ))
    manifest = DatasetManifest(seed=seed, size=size,
                               fraction_lesion_free=lesion_free / total_slices,
                               cases=cases)
    _write_json(out_dir / "manifest.json", manifest.to_dict())
    return manifest


def load_manifest(root) -> DatasetManifest:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    return DatasetManifest.from_dict(json.loads(path.read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# Slice stacking
# ---------------------------------------------------------------------------


def stack_slices(case: PhantomCase, index: int):
    """Three consecutive slices as channels (edge-replicated), center mask as target."""
    n = case.n_slices
    if not 0 <= index < n:
        raise ConfigError(f"slice index {index} out of range for case of {n} slices")
    lo = max(index - 1, 0)
    hi = min(index + 1, n - 1)
    stack = np.stack([case.images[lo], case.images[index], case.images[hi]])
    return stack.astype(np.float32), case.masks[index]


def iter_stacks(case: PhantomCase):
    for i in range(case.n_slices):
        yield stack_slices(case, i)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


@dataclass
class AugmentPolicy:
    rotation_deg: tuple = (-15.0, 15.0)
    crop_area: tuple = (0.8, 1.0)
    flip_prob: float = 0.5
    contrast: tuple = (0.8, 1.2)
    brightness: tuple = (-0.1, 0.1)
    saturation: tuple = (1.0, 1.0)  # identity on single-intensity CT data

    @classmethod
    def identity(cls):
        return cls(rotation_deg=(0.0, 0.0), crop_area=(1.0, 1.0), flip_prob=0.0,
                   contrast=(1.0, 1.0), brightness=(0.0, 0.0), saturation=(1.0, 1.0))

    def is_identity(self):
        return (self.rotation_deg == (0.0, 0.0) and self.crop_area == (1.0, 1.0)
                and self.flip_prob == 0.0 and self.contrast == (1.0, 1.0)
                and self.brightness == (0.0, 0.0))


_saturation_noted = False


def augment(stack, mask, seed, policy: AugmentPolicy):
    """Apply the policy identically to image stack and mask (mask via nearest
    neighbor); photometric jitter touches the image only.  Deterministic in
    ``seed``.  The conceptual order is flip, rotate, crop-and-resize, then
    contrast and brightness; output intensities are clipped to [0, 1]."""
    global _saturation_noted
    stack = np.asarray(stack, dtype=np.float32)
    mask = np.asarray(mask)
    rng = np.random.default_rng(seed)
    angle = math.radians(rng.uniform(*policy.rotation_deg))
    do_flip = rng.random() < policy.flip_prob
    area = rng.uniform(*policy.crop_area)
    oy, ox = rng.random(), rng.random()
    contrast = rng.uniform(*policy.contrast)
    brightness = rng.uniform(*policy.brightness)
    saturation = rng.uniform(*policy.saturation)
    if saturation != 1.0 and not _saturation_noted:
        logger.info("saturation jitter requested: identity on single-intensity CT data")
        _saturation_noted = True

    if policy.is_identity():
        return stack.copy(), mask.copy()

    h, w = mask.shape
    # inverse maps, composed output -> input as (linear, offset) on (y, x)
    def compose(t2, t1):
        l2, o2 = t2
        l1, o1 = t1
        return l2 @ l1, l2 @ o1 + o2

    ident = (np.eye(2), np.zeros(2))
    transform = ident
    # crop-and-resize inverse: output grid -> crop window
    side = math.sqrt(area)
    ch, cw = max(1, round(h * side)), max(1, round(w * side))
    y0 = round(oy * (h - ch))
    x0 = round(ox * (w - cw))
    lin = np.diag([ch / h, cw / w])
    off = np.array([y0 + 0.5 * ch / h - 0.5, x0 + 0.5 * cw / w - 0.5])
    transform = compose(transform, (lin, off))
    # rotation inverse about the image center
    c = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    rot = np.array([[math.cos(angle), -math.sin(angle)],
                    [math.sin(angle), math.cos(angle)]])
    transform = compose((rot, c - rot @ c), transform)
    # horizontal flip (self-inverse)
    if do_flip:
        lin = np.diag([1.0, -1.0])
        off = np.array([0.0, w - 1.0])
        transform = compose((lin, off), transform)

    lin, off = transform
    out_stack = np.stack([
        ndimage.affine_transform(ch_img.astype(np.float64), lin, offset=off,
                                 order=1, mode="constant", cval=0.0)
        for ch_img in stack
    ]).astype(np.float32)
    out_mask = ndimage.affine_transform(mask, lin, offset=off, order=0,
                                        mode="constant", cval=0).astype(mask.dtype)

    mean = float(out_stack.mean())
    out_stack = (out_stack - mean) * contrast + mean + brightness
    return np.clip(out_stack, 0.0, 1.0).astype(np.float32), out_mask
