"""Datasets: loading, [-1, 1] scaling, augmentation, synthetic scenes.

Manifest JSON:

    {"image_size": S, "channels": C,
     "classes": [{"name": str, "items": [path-or-recipe, ...]}, ...]}

Items are either image paths (PNG for 8-bit interchange, .tnsr for
loss-free float dumps) relative to the manifest, or ``{"recipe": ...}``
dicts that regenerate a synthetic image procedurally at load time.
Class ids are dense, in listing order.

PNG decode maps v/127.5 - 1 (255 -> 1.0, 0 -> -1.0); encode rounds
(v+1)*127.5, so a round trip moves a pixel by at most 1/255.

Augmentation variants are exact pixel permutations (no interpolation):
the default set is {original, hflip, vflip, rot90}; ``rotations`` adds
the 180/270 rotations and ``dihedral8`` the full symmetry group of the
square.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .autodiff.tnsr import load_tnsr, save_tnsr
from .ioutil import atomic_open

FAMILIES = ("stripes", "checkerboard", "radial", "blobs")

AUGMENT_SETS = {
    "none": ("original",),
    "default": ("original", "hflip", "vflip", "rot90"),
    "rotations": ("original", "rot90", "rot180", "rot270"),
    "dihedral8": (
        "original", "rot90", "rot180", "rot270",
        "hflip", "hflip_rot90", "vflip", "hflip_rot270",
    ),
}

_VARIANTS = {
    "original": lambda p: p,
    "hflip": lambda p: p[:, :, ::-1],
    "vflip": lambda p: p[:, ::-1, :],
    "rot90": lambda p: np.rot90(p, 1, axes=(1, 2)),
    "rot180": lambda p: np.rot90(p, 2, axes=(1, 2)),
    "rot270": lambda p: np.rot90(p, 3, axes=(1, 2)),
    "hflip_rot90": lambda p: np.rot90(p[:, :, ::-1], 1, axes=(1, 2)),
    "hflip_rot270": lambda p: np.rot90(p[:, :, ::-1], 3, axes=(1, 2)),
}


@dataclass
class ImageRecord:
    pixels: np.ndarray  # (C, H, W) in [-1, 1]
    label: int
    origin: str  # source path or synthetic recipe id
    tag: str = "original"


@dataclass
class DatasetManifest:
    image_size: int
    channels: int
    classes: list  # [{"name": str, "items": [...]}]

    @property
    def class_names(self):
        return [c["name"] for c in self.classes]

    def to_dict(self):
        return {
            "image_size": self.image_size,
            "channels": self.channels,
            "classes": self.classes,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(image_size=int(d["image_size"]), channels=int(d["channels"]), classes=d["classes"])


def save_manifest(path, manifest):
    with atomic_open(path, "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path):
    try:
        with open(path) as fh:
            return DatasetManifest.from_dict(json.load(fh))
    except (OSError, ValueError, KeyError) as e:
        raise ValueError(f"{path}: cannot read manifest: {e}") from e


# ---------------------------------------------------------------------------
# pixel codecs
# ---------------------------------------------------------------------------

def save_png(path, pixels):
    """(C,H,W) floats in [-1,1] -> 8-bit PNG (1 or 3 channels)."""
    arr = np.asarray(pixels)
    q = np.clip(np.round((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)
    if q.shape[0] == 1:
        img = Image.fromarray(q[0], mode="L")
    elif q.shape[0] == 3:
        img = Image.fromarray(q.transpose(1, 2, 0), mode="RGB")
    else:
        raise ValueError(f"PNG supports 1 or 3 channels, got {q.shape[0]}")
    with atomic_open(path) as fh:
        img.save(fh, format="PNG")


def load_png(path, channels):
    try:
        with Image.open(path) as img:
            img = img.convert("L" if channels == 1 else "RGB")
            arr = np.asarray(img, dtype=np.float64)
    except (OSError, ValueError) as e:
        raise ValueError(f"{path}: cannot decode image: {e}") from e
    if channels == 1:
        arr = arr[None, :, :]
    else:
        arr = arr.transpose(2, 0, 1)
    return (arr / 127.5 - 1.0).astype(np.float32)


def _load_pixels(path, channels, size):
    if path.endswith(".tnsr"):
        arr = load_tnsr(path)
        if arr.ndim != 3:
            raise ValueError(f"{path}: expected a rank-3 (C,H,W) dump, got rank {arr.ndim}")
        if np.abs(arr).max() > 1.0 + 1e-6:
            raise ValueError(f"{path}: pixel values outside [-1, 1]")
        pixels = arr
    else:
        pixels = load_png(path, channels)
    if pixels.shape != (channels, size, size):
        raise ValueError(f"{path}: expected shape ({channels}, {size}, {size}), got {pixels.shape}")
    return pixels.astype(np.float32)


def load_images(manifest, root="."):
    """Materialize every manifest item as an ImageRecord, in listing order."""
    records = []
    for label, cls in enumerate(manifest.classes):
        for item in cls["items"]:
            if isinstance(item, dict) and "recipe" in item:
                r = item["recipe"]
                pixels = render_recipe(r, manifest.image_size, manifest.channels)
                origin = recipe_id(r)
            elif isinstance(item, str):
                path = os.path.join(root, item)
                pixels = _load_pixels(path, manifest.channels, manifest.image_size)
                origin = item
            else:
                raise ValueError(f"manifest item for class {cls['name']!r} is neither path nor recipe: {item!r}")
            records.append(ImageRecord(pixels=pixels, label=label, origin=origin))
    return records


def records_to_arrays(records):
    images = np.stack([r.pixels for r in records]).astype(np.float32)
    labels = np.array([r.label for r in records], dtype=np.int64)
    return images, labels


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def augment(record, variants=AUGMENT_SETS["default"]):
    """Tagged pixel-permutation variants of one record; label and origin kept."""
    out = []
    for name in variants:
        fn = _VARIANTS.get(name)
        if fn is None:
            raise ValueError(f"unknown augmentation variant {name!r}")
        out.append(
            ImageRecord(
                pixels=np.ascontiguousarray(fn(record.pixels)),
                label=record.label,
                origin=record.origin,
                tag=name,
            )
        )
    return out


def train_test_view(records, train_idx, test_idx, variants=AUGMENT_SETS["default"]):
    """Augmented training view + original-only test view for one fold.

    The two index sets must be disjoint; the returned views never share
    an origin id, so no test image leaks into training in any variant.
    """
    train_idx = np.asarray(train_idx)
    test_idx = np.asarray(test_idx)
    if np.intersect1d(train_idx, test_idx).size:
        raise ValueError("train/test index sets overlap")
    train = []
    for i in train_idx:
        train.extend(augment(records[int(i)], variants))
    test = [records[int(i)] for i in test_idx]
    test_origins = {r.origin for r in test}
    if any(r.origin in test_origins for r in train):
        raise ValueError("test origin leaked into training view")
    return train, test


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    n_classes: int = 4
    per_class: int = 50
    size: int = 32
    channels: int = 3
    seed: int = 7
    families: tuple = FAMILIES  # cycled over classes

    def __post_init__(self):
        if self.size < 16 or self.size & (self.size - 1):
            raise ValueError(f"size must be a power of two >= 16, got {self.size}")
        if self.n_classes < 1 or self.per_class < 1:
            raise ValueError("need at least one class and one sample per class")
        for f in self.families:
            if f not in FAMILIES:
                raise ValueError(f"unknown texture family {f!r}; known: {FAMILIES}")


def _texture(family, rng, size):
    u = np.linspace(0.0, 1.0, size, endpoint=False)
    yy, xx = np.meshgrid(u, u, indexing="ij")
    if family == "stripes":
        freq = rng.uniform(2.0, 4.0)
        theta = rng.uniform(0.0, np.pi)
        phase = rng.uniform(0.0, 2 * np.pi)
        return np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    if family == "checkerboard":
        freq = rng.integers(2, 5)
        p1, p2 = rng.uniform(0.0, 2 * np.pi, size=2)
        return np.sin(2 * np.pi * freq * xx + p1) * np.sin(2 * np.pi * freq * yy + p2)
    if family == "radial":
        cx, cy = rng.uniform(0.3, 0.7, size=2)
        freq = rng.uniform(1.5, 3.0)
        phase = rng.uniform(0.0, 2 * np.pi)
        r = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
        return np.cos(2 * np.pi * freq * r + phase)
    if family == "blobs":
        k = int(rng.integers(4, 7))
        canvas = np.zeros((size, size))
        for i in range(k):
            cx, cy = rng.uniform(0.1, 0.9, size=2)
            sigma = rng.uniform(0.08, 0.18)
            amp = 1.0 if i % 2 == 0 else -1.0
            canvas += amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma**2))
        peak = np.abs(canvas).max()
        return canvas / peak if peak > 0 else canvas
    raise ValueError(f"unknown texture family {family!r}")


def _class_anchor(class_id, channels):
    # distinct per-channel mean offsets; sign pattern is the class id's bits
    return np.array(
        [0.55 if (class_id >> ch) & 1 else -0.55 for ch in range(channels)]
    )


def render_recipe(recipe, size, channels):
    """Deterministic synthetic image from its recipe dict."""
    family = recipe["family"]
    if family not in FAMILIES:
        raise ValueError(f"unknown texture family {family!r}; known: {FAMILIES}")
    seed, class_id, sample = int(recipe["seed"]), int(recipe["class"]), int(recipe["sample"])
    rng = np.random.default_rng([seed, 40, class_id, sample])
    tex = _texture(family, rng, size)
    anchor = _class_anchor(class_id, channels)
    pixels = anchor[:, None, None] + 0.4 * tex[None, :, :]
    return np.clip(pixels, -1.0, 1.0).astype(np.float32)


def recipe_id(recipe):
    return f"{recipe['family']}:seed={recipe['seed']}:class={recipe['class']}:sample={recipe['sample']}"


def synth_dataset(spec):
    """Procedural dataset: (records, manifest), a pure function of a SyntheticSpec.

    Classes carry distinct per-channel mean anchors (amplitude 0.55
    against texture amplitude 0.4), so with 3 channels up to 8 classes
    are linearly separable from raw pixel statistics by construction.
    """
    records = []
    classes = []
    for c in range(spec.n_classes):
        family = spec.families[c % len(spec.families)]
        items = []
        for s in range(spec.per_class):
            recipe = {"family": family, "seed": spec.seed, "class": c, "sample": s}
            pixels = render_recipe(recipe, spec.size, spec.channels)
            records.append(ImageRecord(pixels=pixels, label=c, origin=recipe_id(recipe)))
            items.append({"recipe": recipe})
        classes.append({"name": f"{family}_{c}", "items": items})
    manifest = DatasetManifest(image_size=spec.size, channels=spec.channels, classes=classes)
    return records, manifest


def write_dataset(out_dir, records, manifest):
    """Materialize records as image files and write a path-based manifest.

    PNG for 1- or 3-channel data, .tnsr otherwise. Returns the manifest
    path.
    """
    os.makedirs(out_dir, exist_ok=True)
    use_png = manifest.channels in (1, 3)
    ext = "png" if use_png else "tnsr"
    by_label = {}
    for r in records:
        by_label.setdefault(r.label, []).append(r)
    classes = []
    for label, cls in enumerate(manifest.classes):
        name = cls["name"]
        cls_dir = os.path.join(out_dir, name)
        os.makedirs(cls_dir, exist_ok=True)
        items = []
        for i, r in enumerate(by_label.get(label, [])):
            rel = os.path.join(name, f"img_{i:05d}.{ext}")
            path = os.path.join(out_dir, rel)
            if use_png:
                save_png(path, r.pixels)
            else:
                save_tnsr(path, r.pixels)
            items.append(rel)
        classes.append({"name": name, "items": items})
    out = DatasetManifest(image_size=manifest.image_size, channels=manifest.channels, classes=classes)
    manifest_path = os.path.join(out_dir, "manifest.json")
    save_manifest(manifest_path, out)
    return manifest_path
