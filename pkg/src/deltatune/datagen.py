"""Synthetic biased image datasets and an image-folder reader/writer.

Every generator renders a class shape (filled square for class 0, cross for
class 1) on a noisy background and adds one spurious factor whose relation to
the label differs between the train split and the test split.
"""

from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

IMAGE_SHAPE = (3, 16, 16)
SHAPE_SIZE = 6


class Structure(str, Enum):
    ONE_SIDED_PATCH = "OneSidedPatch"
    ONE_SIDED_ATTRIBUTE = "OneSidedAttribute"
    TWO_SIDED_BACKGROUND = "TwoSidedBackground"
    SITE_SHIFT = "SiteShift"


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray
    group: np.ndarray
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "Split":
        return Split(self.x[idx], self.y[idx], self.group[idx], self.ids[idx])

    def equal(self, other: "Split") -> bool:
        return (
            np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.group, other.group)
            and np.array_equal(self.ids, other.ids)
        )


@dataclass
class DatasetBundle:
    """Biased ``train``, bias-contradicting ``tune_pool`` and less-biased ``test``.

    ``holdout`` is drawn from the train distribution and measures the bias
    gap.  ``contradicting`` lists the ``(label, group)`` pairs that violate the
    training-time correlation; ``None`` labels match any class.
    """

    train: Split
    tune_pool: Split
    test: Split
    holdout: Optional[Split] = None
    contradicting: Optional[list] = None
    metadata: dict = field(default_factory=dict)

    def splits(self) -> dict:
        out = {"train": self.train, "tune": self.tune_pool, "test": self.test}
        if self.holdout is not None:
            out["holdout"] = self.holdout
        return out

    def equal(self, other: "DatasetBundle") -> bool:
        mine, theirs = self.splits(), other.splits()
        return mine.keys() == theirs.keys() and all(mine[k].equal(theirs[k]) for k in mine)


@dataclass(frozen=True)
class BiasSpec:
    """Generator parameters.  Fields unused by a structure are ignored."""

    structure: Structure = Structure.ONE_SIDED_PATCH
    seed: int = 0
    n_train: int = 2000
    n_tune: int = 1200
    n_test: int = 2000
    n_holdout: int = 1000
    label_noise: float = 0.03
    # the tuning pool stands for a curated set, so it is clean by default
    tune_label_noise: float = 0.0
    noise_std: float = 0.12
    shape_amplitude: float = 0.35
    # one-sided patch / attribute
    patch_rate_train: float = 0.7
    patch_rate_test: float = 0.5
    patch_size: int = 5
    attribute_rate_class0: float = 0.5
    attribute_strength: float = 0.5
    # two-sided background
    rho: float = 0.95
    class1_frac_train: float = 0.3
    class1_frac_test: float = 0.3
    background_strength: float = 0.25
    # site shift
    site_offsets: tuple = (
        (0.0, 0.0, 0.0),
        (0.04, -0.03, 0.02),
        (-0.03, 0.04, -0.02),
        (0.02, 0.02, -0.04),
        (0.04, -0.04, 0.03),
    )
    site_contrasts: tuple = (1.0, 1.15, 0.9, 1.05, 0.8)
    # extra per-site sensor noise (std)
    site_noise: tuple = (0.0, 0.0, 0.0, 0.0, 0.15)
    train_sites: tuple = (0, 1, 2, 3)
    test_site: int = 4

    def __post_init__(self):
        object.__setattr__(self, "structure", Structure(self.structure))
        object.__setattr__(self, "site_offsets", tuple(tuple(float(v) for v in o) for o in self.site_offsets))
        object.__setattr__(self, "site_contrasts", tuple(float(c) for c in self.site_contrasts))
        object.__setattr__(self, "site_noise", tuple(float(c) for c in self.site_noise))
        object.__setattr__(self, "train_sites", tuple(int(s) for s in self.train_sites))
        for name in ("n_train", "n_tune", "n_test", "n_holdout"):
            if getattr(self, name) < 4:
                raise ValueError(f"{name} must be at least 4 (2 per class), got {getattr(self, name)}")
        for name in ("rho", "label_noise", "tune_label_noise", "patch_rate_train", "patch_rate_test", "attribute_rate_class0",
                     "class1_frac_train", "class1_frac_test"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["structure"] = self.structure.value
        d["site_offsets"] = [list(o) for o in self.site_offsets]
        d["site_contrasts"] = list(self.site_contrasts)
        d["site_noise"] = list(self.site_noise)
        d["train_sites"] = list(self.train_sites)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BiasSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown dataset keys: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------
# rendering


def _shape_masks(size: int = SHAPE_SIZE) -> np.ndarray:
    square = np.ones((size, size), dtype=bool)
    cross = np.zeros((size, size), dtype=bool)
    lo, hi = size // 2 - 1, size // 2 + 1
    cross[lo:hi, :] = True
    cross[:, lo:hi] = True
    return np.stack([square, cross])


_MASKS = _shape_masks()


def _render_base(rng: np.random.Generator, shape_class: np.ndarray, spec: BiasSpec, background=None) -> np.ndarray:
    """Noise background (optionally tinted per sample) with the class shape."""
    n = len(shape_class)
    c, h, w = IMAGE_SHAPE
    x = 0.5 + spec.noise_std * rng.standard_normal((n, c, h, w))
    if background is not None:
        x += background[:, :, None, None]
    # the shape avoids the outer 2-pixel frame where patches and borders live
    lo, hi = 2, h - 2 - SHAPE_SIZE
    rows = rng.integers(lo, hi + 1, size=n)
    cols = rng.integers(lo, hi + 1, size=n)
    for i in range(n):
        m = _MASKS[shape_class[i]]
        x[i, :, rows[i]:rows[i] + SHAPE_SIZE, cols[i]:cols[i] + SHAPE_SIZE] += spec.shape_amplitude * m
    return x


def _labels(rng: np.random.Generator, n: int, class1_frac: float = 0.5) -> np.ndarray:
    n1 = int(round(n * class1_frac))
    n1 = min(max(n1, 2), n - 2)
    y = np.array([0] * (n - n1) + [1] * n1)
    return rng.permutation(y)


def _shape_classes(rng: np.random.Generator, y: np.ndarray, noise: float) -> np.ndarray:
    flip = rng.random(len(y)) < noise
    return np.where(flip, 1 - y, y)


def _paste_patches(rng: np.random.Generator, x: np.ndarray, which: np.ndarray, size: int) -> None:
    _, _, h, w = x.shape
    for i in np.flatnonzero(which):
        color = rng.random(3)
        color[rng.integers(3)] = 1.0
        color[rng.integers(3)] = 0.0
        corner = rng.integers(4)
        r = 0 if corner < 2 else h - size
        c = 0 if corner % 2 == 0 else w - size
        x[i, :, r:r + size, c:c + size] = color[:, None, None]


_ATTRIBUTE_TINTS = np.array([[0.3, -0.15, -0.15], [-0.15, -0.15, 0.3]])


def _paint_border(x: np.ndarray, attribute: np.ndarray, strength: float = 1.0) -> None:
    tint = strength * _ATTRIBUTE_TINTS[attribute][:, :, None]
    x[:, :, 0, :] += tint
    x[:, :, -1, :] += tint
    x[:, :, 1:-1, 0] += tint
    x[:, :, 1:-1, -1] += tint


def _finish(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 1.0)


class _Ids:
    def __init__(self):
        self.next = 0

    def take(self, n: int) -> np.ndarray:
        out = np.arange(self.next, self.next + n)
        self.next += n
        return out


def _tune_spec(spec: BiasSpec) -> BiasSpec:
    return replace(spec, label_noise=spec.tune_label_noise)


def _meta(spec: BiasSpec, name: str) -> dict:
    return {"generator": name, "seed": spec.seed, "bias": spec.to_dict()}


# --------------------------------------------------------------------------
# generators


def _patch_split(rng, n, spec, train: bool, ids: _Ids, only_contradicting: bool = False) -> Split:
    y = np.ones(n, dtype=np.int64) if only_contradicting else _labels(rng, n)
    x = _render_base(rng, _shape_classes(rng, y, spec.label_noise), spec)
    if only_contradicting:
        patched = np.ones(n, dtype=bool)
    elif train:
        patched = (y == 0) & (rng.random(n) < spec.patch_rate_train)
    else:
        # exact per-class rate so the test split is not biased by sampling noise
        patched = np.zeros(n, dtype=bool)
        for cls in (0, 1):
            idx = np.flatnonzero(y == cls)
            k = int(round(len(idx) * spec.patch_rate_test))
            patched[rng.choice(idx, size=k, replace=False)] = True
    _paste_patches(rng, x, patched, spec.patch_size)
    group = np.where(patched, "patch", "clean")
    return Split(_finish(x), y, group, ids.take(n))


def gen_one_sided_patch_bias(spec: BiasSpec) -> DatasetBundle:
    """Colorful corner patches occur only on class 0 in training.

    The test split pastes patches onto both classes at ``patch_rate_test``;
    the tuning pool holds patched class-1 images.
    """
    rng = np.random.default_rng(spec.seed)
    ids = _Ids()
    train = _patch_split(rng, spec.n_train, spec, True, ids)
    holdout = _patch_split(rng, spec.n_holdout, spec, True, ids)
    tune = _patch_split(rng, spec.n_tune, _tune_spec(spec), False, ids, only_contradicting=True)
    test = _patch_split(rng, spec.n_test, spec, False, ids)
    return DatasetBundle(train, tune, test, holdout, [(1, "patch")], _meta(spec, "one_sided_patch"))


def _attribute_split(rng, n, spec, train: bool, ids: _Ids, only_contradicting: bool = False) -> Split:
    y = np.ones(n, dtype=np.int64) if only_contradicting else _labels(rng, n)
    x = _render_base(rng, _shape_classes(rng, y, spec.label_noise), spec)
    if only_contradicting:
        attr = np.ones(n, dtype=np.int64)
    elif train:
        attr = np.where(y == 1, 0, (rng.random(n) >= spec.attribute_rate_class0).astype(np.int64))
    else:
        attr = np.zeros(n, dtype=np.int64)
        for cls in (0, 1):
            idx = np.flatnonzero(y == cls)
            attr[rng.choice(idx, size=len(idx) // 2, replace=False)] = 1
    _paint_border(x, attr, spec.attribute_strength)
    group = np.where(attr == 1, "attr_b", "attr_a")
    return Split(_finish(x), y, group, ids.take(n))


def gen_one_sided_attribute_bias(spec: BiasSpec) -> DatasetBundle:
    """Border tint A on every class-1 training image; class 0 carries A or B.

    Tint B therefore only ever appears with class 0 during training.  In the
    test split tint and class are independent; the tuning pool is class 1
    with tint B.
    """
    rng = np.random.default_rng(spec.seed)
    ids = _Ids()
    train = _attribute_split(rng, spec.n_train, spec, True, ids)
    holdout = _attribute_split(rng, spec.n_holdout, spec, True, ids)
    tune = _attribute_split(rng, spec.n_tune, _tune_spec(spec), False, ids, only_contradicting=True)
    test = _attribute_split(rng, spec.n_test, spec, False, ids)
    return DatasetBundle(train, tune, test, holdout, [(1, "attr_b")], _meta(spec, "one_sided_attribute"))


_BACKGROUNDS = np.array([[-0.6, 0.6, -0.6], [-0.6, -0.6, 0.6]])


def _background_split(rng, n, spec, agreement: float, class1_frac: float, ids: _Ids) -> Split:
    y = _labels(rng, n, class1_frac)
    if agreement in (0.0, 1.0):
        bg = y if agreement == 1.0 else 1 - y
    else:
        # exact agreement count per class
        bg = y.copy()
        for cls in (0, 1):
            idx = np.flatnonzero(y == cls)
            k = int(round(len(idx) * (1.0 - agreement)))
            bg[rng.choice(idx, size=k, replace=False)] = 1 - cls
    tint = spec.background_strength * _BACKGROUNDS[bg]
    x = _render_base(rng, _shape_classes(rng, y, spec.label_noise), spec, background=tint)
    group = np.where(bg == 1, "bg1", "bg0")
    return Split(_finish(x), y, group, ids.take(n))


def gen_two_sided_background_bias(spec: BiasSpec) -> DatasetBundle:
    """Background family agrees with the class with probability ``rho`` in training.

    Test and tuning pool (a validation draw) use agreement 0.5.  Classes are
    imbalanced in both.
    """
    if not 0.0 <= spec.rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {spec.rho}")
    rng = np.random.default_rng(spec.seed)
    ids = _Ids()
    train = _background_split(rng, spec.n_train, spec, spec.rho, spec.class1_frac_train, ids)
    holdout = _background_split(rng, spec.n_holdout, spec, spec.rho, spec.class1_frac_train, ids)
    tune = _background_split(rng, spec.n_tune, _tune_spec(spec), 0.5, spec.class1_frac_test, ids)
    test = _background_split(rng, spec.n_test, spec, 0.5, spec.class1_frac_test, ids)
    return DatasetBundle(train, tune, test, holdout, [(0, "bg1"), (1, "bg0")], _meta(spec, "two_sided_background"))


def site_transform(x: np.ndarray, offset, contrast: float) -> np.ndarray:
    """Contrast about 0.5 followed by a per-channel offset."""
    off = np.asarray(offset, dtype=np.float64)[None, :, None, None]
    return contrast * (x - 0.5) + 0.5 + off


def _site_split(rng, n, spec, sites, ids: _Ids) -> Split:
    y = _labels(rng, n)
    site = np.asarray(sites)[rng.integers(len(sites), size=n)] if len(sites) > 1 else np.full(n, sites[0])
    x = _render_base(rng, _shape_classes(rng, y, spec.label_noise), spec)
    for s in np.unique(site):
        m = site == s
        x[m] = site_transform(x[m], spec.site_offsets[s], spec.site_contrasts[s])
        if spec.site_noise[s]:
            x[m] += spec.site_noise[s] * rng.standard_normal(x[m].shape)
    group = np.array([f"site{s}" for s in site])
    return Split(_finish(x), y, group, ids.take(n))


def gen_domain_shift(spec: BiasSpec) -> DatasetBundle:
    """Train on several capture sites, test on a disjoint one.

    The tuning pool and the test split both come from the held-out site.
    """
    if len(spec.train_sites) < 2:
        raise ValueError("need at least two training sites")
    if spec.test_site in spec.train_sites:
        raise ValueError(f"test site {spec.test_site} also used for training")
    n_sites = len(spec.site_offsets)
    if len(spec.site_contrasts) != n_sites or len(spec.site_noise) != n_sites or any(not 0 <= s < n_sites for s in (*spec.train_sites, spec.test_site)):
        raise ValueError("site indices out of range of the site tables")
    rng = np.random.default_rng(spec.seed)
    ids = _Ids()
    train = _site_split(rng, spec.n_train, spec, spec.train_sites, ids)
    holdout = _site_split(rng, spec.n_holdout, spec, spec.train_sites, ids)
    site = (spec.test_site,)
    tune = _site_split(rng, spec.n_tune, _tune_spec(spec), site, ids)
    test = _site_split(rng, spec.n_test, spec, site, ids)
    return DatasetBundle(train, tune, test, holdout, [(None, f"site{spec.test_site}")], _meta(spec, "domain_shift"))


GENERATORS = {
    Structure.ONE_SIDED_PATCH: gen_one_sided_patch_bias,
    Structure.ONE_SIDED_ATTRIBUTE: gen_one_sided_attribute_bias,
    Structure.TWO_SIDED_BACKGROUND: gen_two_sided_background_bias,
    Structure.SITE_SHIFT: gen_domain_shift,
}


def generate(spec: BiasSpec) -> DatasetBundle:
    return GENERATORS[spec.structure](spec)


# --------------------------------------------------------------------------
# image folders

_SPLIT_DIRS = {"train": "train", "tune": "tune", "test": "test", "holdout": "holdout"}
MANIFEST = "manifest.tsv"


def export_image_folder(bundle: DatasetBundle, root) -> None:
    """Write ``<root>/<split>/<class>/<group>/<id>.png`` and ``manifest.tsv``."""
    from PIL import Image

    root = Path(root)
    rows = []
    for split_name, split in bundle.splits().items():
        for img, label, group, sid in zip(split.x, split.y, split.group, split.ids):
            d = root / split_name / str(int(label)) / str(group)
            d.mkdir(parents=True, exist_ok=True)
            arr = np.round(np.clip(img, 0, 1).transpose(1, 2, 0) * 255).astype(np.uint8)
            Image.fromarray(arr, mode="RGB").save(d / f"{int(sid)}.png")
            rows.append((int(sid), split_name, int(label), str(group)))
    with open(root / MANIFEST, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(["id", "split", "class", "group"])
        w.writerows(rows)


def load_image_folder(root, image_shape=IMAGE_SHAPE, contradicting=None) -> DatasetBundle:
    """Read a folder written by :func:`export_image_folder` (or laid out the same way).

    Files are enumerated in lexicographic path order; images are resized to
    ``image_shape`` when needed.
    """
    from PIL import Image

    root = Path(root)
    manifest_path = root / MANIFEST
    if not manifest_path.is_file():
        raise FileNotFoundError(f"missing manifest {manifest_path}")
    manifest = {}
    with open(manifest_path, newline="") as f:
        for row in csv.DictReader(f, delimiter="\t"):
            manifest[(row["split"], row["id"])] = (int(row["class"]), row["group"])
    c, h, w = image_shape
    splits = {}
    for split_name in ("train", "tune", "test", "holdout"):
        split_dir = root / split_name
        if not split_dir.is_dir():
            if split_name == "holdout":
                continue
            raise FileNotFoundError(f"missing split directory {split_dir}")
        files = sorted(p for p in split_dir.rglob("*") if p.is_file())
        if not files:
            raise ValueError(f"split directory {split_dir} is empty")
        xs, ys, gs, ids = [], [], [], []
        for p in files:
            rel = p.relative_to(split_dir).parts
            if len(rel) != 3:
                raise ValueError(f"unexpected layout at {p}")
            label, group = int(rel[0]), rel[1]
            key = (split_name, p.stem)
            if key not in manifest:
                raise ValueError(f"{p} is not listed in the manifest")
            if manifest[key] != (label, group):
                raise ValueError(f"{p}: directory says class {label}/{group}, manifest says {manifest[key]}")
            try:
                with Image.open(p) as im:
                    im = im.convert("RGB")
                    if im.size != (w, h):
                        im = im.resize((w, h), Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.float64) / 255.0
            except OSError as e:
                raise ValueError(f"cannot decode {p}: {e}") from e
            xs.append(arr.transpose(2, 0, 1))
            ys.append(label)
            gs.append(group)
            ids.append(int(p.stem))
        splits[split_name] = Split(np.stack(xs), np.array(ys, dtype=np.int64), np.array(gs), np.array(ids))
    return DatasetBundle(
        splits["train"], splits["tune"], splits["test"], splits.get("holdout"),
        contradicting, {"generator": "image_folder", "root": os.fspath(root)},
    )
