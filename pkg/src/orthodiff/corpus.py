"""Procedural controlled-factor corpus: identity x pose x background.

Subjects are parametric 2D shapes with textures; backgrounds are full-canvas
patterns so they act as strong confounders.  Every sample knows its exact
factor labels, carries a subject-free render of its own background, and
references three pose-matched variants (same pose parameters, different
identities) rendered on a neutral canvas so shared pose is the only factor
they have in common with the sample.
"""

import dataclasses
import json
import os
import zlib

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    ConfigurationError,
    CorruptCorpusError,
    InputError,
    PersistenceError,
    VersioningError,
)

MANIFEST_SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"

COLORS = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.75, 0.25),
    "blue": (0.20, 0.35, 0.90),
    "yellow": (0.95, 0.85, 0.15),
    "magenta": (0.85, 0.20, 0.75),
    "cyan": (0.15, 0.80, 0.85),
    "orange": (0.95, 0.55, 0.10),
    "purple": (0.55, 0.25, 0.80),
    "white": (0.95, 0.95, 0.95),
    "teal": (0.10, 0.55, 0.50),
    "navy": (0.10, 0.15, 0.45),
    "olive": (0.50, 0.55, 0.15),
    "pink": (0.95, 0.65, 0.75),
    "gray": (0.50, 0.50, 0.50),
}

SHAPE_FAMILIES = (
    "circle", "square", "triangle", "star", "cross",
    "diamond", "ring", "hexagon", "crescent", "bar",
)

TEXTURES = ("solid", "stripes", "dots", "checker", "rings")

BG_PATTERNS = ("solid", "hgrad", "vgrad", "checker", "noise")

DEFAULT_PALETTES = (
    ("red", "yellow"), ("blue", "white"), ("green", "cyan"),
    ("purple", "pink"), ("orange", "teal"), ("navy", "olive"),
    ("magenta", "white"), ("teal", "yellow"), ("olive", "pink"),
    ("navy", "cyan"),
)

POSE_ROTATIONS = (0, 45, 90, 135, 180, 225, 270, 315)
POSE_OFFSETS = (
    (0.0, 0.0), (0.3, 0.0), (-0.3, 0.0), (0.0, 0.3), (0.0, -0.3),
    (0.25, 0.25), (-0.25, -0.25), (-0.25, 0.25), (0.25, -0.25),
)
POSE_SCALES = (0.45, 0.6, 0.75)

# Pose-matched variants are rendered on this canvas, which is deliberately
# outside the background vocabulary: identity averages out across variants
# and the background contributes only a constant.
NEUTRAL_BACKGROUND = ("solid", ("gray", "gray"))


@dataclasses.dataclass(frozen=True)
class IdentitySpec:
    family: str
    color: str
    texture: str


@dataclasses.dataclass(frozen=True)
class PoseSpec:
    rotation: float
    offset: tuple
    scale: float


@dataclasses.dataclass(frozen=True)
class BackgroundSpec:
    pattern: str
    palette: tuple  # pair of color names


@dataclasses.dataclass(frozen=True)
class FactorSpec:
    identity: IdentitySpec
    pose: PoseSpec
    background: BackgroundSpec

    def to_dict(self):
        return {
            "identity": dataclasses.asdict(self.identity),
            "pose": {"rotation": self.pose.rotation,
                     "offset": list(self.pose.offset),
                     "scale": self.pose.scale},
            "background": {"pattern": self.background.pattern,
                           "palette": list(self.background.palette)},
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            identity=IdentitySpec(**d["identity"]),
            pose=PoseSpec(rotation=d["pose"]["rotation"],
                          offset=tuple(d["pose"]["offset"]),
                          scale=d["pose"]["scale"]),
            background=BackgroundSpec(pattern=d["background"]["pattern"],
                                      palette=tuple(d["background"]["palette"])),
        )


# ---------------------------------------------------------------------------
# rendering

def _validate_factors(factors):
    ident, pose, bg = factors.identity, factors.pose, factors.background
    if ident.family not in SHAPE_FAMILIES:
        raise InputError(f"unknown shape family: {ident.family!r}")
    if ident.color not in COLORS:
        raise InputError(f"unknown color: {ident.color!r}")
    if ident.texture not in TEXTURES:
        raise InputError(f"unknown texture: {ident.texture!r}")
    if bg.pattern not in BG_PATTERNS:
        raise InputError(f"unknown background pattern: {bg.pattern!r}")
    for name in bg.palette:
        if name not in COLORS:
            raise InputError(f"unknown palette color: {name!r}")
    if not np.isfinite([pose.rotation, *pose.offset, pose.scale]).all():
        raise InputError("pose parameters must be finite")
    if pose.scale <= 0:
        raise InputError("pose scale must be positive")


def _grid(size):
    ax = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    return np.meshgrid(ax, ax)  # X (columns), Y (rows)


def _subject_frame(pose, size):
    X, Y = _grid(size)
    theta = np.deg2rad(pose.rotation)
    c, s = np.cos(theta), np.sin(theta)
    xs, ys = X - pose.offset[0], Y - pose.offset[1]
    u = (xs * c + ys * s) / pose.scale
    v = (-xs * s + ys * c) / pose.scale
    return u, v


def _shape_mask(family, u, v):
    r = np.hypot(u, v)
    if family == "circle":
        return r < 0.6
    if family == "square":
        return np.maximum(np.abs(u), np.abs(v)) < 0.5
    if family == "triangle":
        return (v >= -0.45) & (v <= 0.55) & (np.abs(u) <= 0.55 * (0.55 - v))
    if family == "star":
        phi = np.arctan2(v, u)
        return r < 0.25 + 0.35 * (0.5 + 0.5 * np.cos(5.0 * phi))
    if family == "cross":
        return ((np.abs(u) < 0.18) & (np.abs(v) < 0.6)) | \
               ((np.abs(v) < 0.18) & (np.abs(u) < 0.6))
    if family == "diamond":
        return np.abs(u) + np.abs(v) < 0.65
    if family == "ring":
        return (r > 0.3) & (r < 0.6)
    if family == "hexagon":
        return np.maximum(np.abs(v), 0.866 * np.abs(u) + 0.5 * np.abs(v)) < 0.52
    if family == "crescent":
        return (r < 0.6) & (np.hypot(u - 0.3, v) > 0.45)
    if family == "bar":
        return (np.abs(u) < 0.62) & (np.abs(v) < 0.22)
    raise InputError(f"unknown shape family: {family!r}")


def _subject_colors(identity, u, v):
    c1 = np.array(COLORS[identity.color])
    c2 = 0.35 * c1  # darker shade of the fill for two-tone textures
    tex = identity.texture
    if tex == "solid":
        second = np.zeros(u.shape, dtype=bool)
    elif tex == "stripes":
        second = (np.floor(u * 4.0).astype(int) % 2) == 0
    elif tex == "dots":
        second = ((u * 3.0) % 1.0 - 0.5) ** 2 + ((v * 3.0) % 1.0 - 0.5) ** 2 < 0.22 ** 2
    elif tex == "checker":
        second = ((np.floor(u * 3.0) + np.floor(v * 3.0)).astype(int) % 2) == 0
    elif tex == "rings":
        second = (np.floor(np.hypot(u, v) * 4.0).astype(int) % 2) == 0
    else:
        raise InputError(f"unknown texture: {tex!r}")
    return np.where(second[..., None], c2, c1)


def _bilinear_upsample(coarse, size):
    n = coarse.shape[0]
    pos = np.linspace(0.0, n - 1.0, size)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    f = pos - i0
    rows = coarse[i0] * (1.0 - f)[:, None] + coarse[i1] * f[:, None]
    return rows[:, i0] * (1.0 - f)[None, :] + rows[:, i1] * f[None, :]


def _background_image(bg, size):
    pa = np.array(COLORS[bg.palette[0]])
    pb = np.array(COLORS[bg.palette[1]])
    X, Y = _grid(size)
    if bg.pattern == "solid":
        mix = np.zeros((size, size))
    elif bg.pattern == "hgrad":
        mix = (X + 1.0) / 2.0
    elif bg.pattern == "vgrad":
        mix = (Y + 1.0) / 2.0
    elif bg.pattern == "checker":
        cell = max(size // 4, 1)
        rows, cols = np.indices((size, size))
        mix = (((rows // cell) + (cols // cell)) % 2).astype(float)
    elif bg.pattern == "noise":
        # Noise keyed on the background spec itself so renders stay pure
        # functions of their factors.
        key = f"noise|{bg.palette[0]}|{bg.palette[1]}"
        seed = zlib.crc32(key.encode("utf-8"))
        rng = np.random.Generator(np.random.PCG64(seed))
        mix = _bilinear_upsample(rng.random((5, 5)), size)
    else:
        raise InputError(f"unknown background pattern: {bg.pattern!r}")
    return pa[None, None, :] * (1.0 - mix[..., None]) + pb[None, None, :] * mix[..., None]


def render_with_mask(factors, with_subject=True, size=32):
    """Render one sample; also return the subject mask (all-False without)."""
    _validate_factors(factors)
    img = _background_image(factors.background, size)
    mask = np.zeros((size, size), dtype=bool)
    if with_subject:
        u, v = _subject_frame(factors.pose, size)
        mask = _shape_mask(factors.identity.family, u, v)
        colors = _subject_colors(factors.identity, u, v)
        img = np.where(mask[..., None], colors, img)
    # Quantize to the 8-bit grid so PNG round-trips are bitwise exact.
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0, mask


def render(factors, with_subject=True, size=32):
    """Deterministic render of the factor combination; [H, W, 3] in [0, 1]."""
    img, _ = render_with_mask(factors, with_subject=with_subject, size=size)
    return img


def save_png(image, path):
    arr = np.round(np.asarray(image) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_png(path):
    if not os.path.exists(path):
        raise PersistenceError(f"image file missing: {path}")
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise CorruptCorpusError(f"cannot decode image {path}: {exc}") from exc
    return arr / 255.0


# ---------------------------------------------------------------------------
# corpus generation

@dataclasses.dataclass
class CorpusSample:
    index: int
    main_image: np.ndarray
    background_image: np.ndarray
    pose_variants: list
    factors: FactorSpec
    variant_identities: list
    prompt_subject_token: str


class Manifest:
    """On-disk index of a generated corpus."""

    def __init__(self, data, root):
        self.data = data
        self.root = root

    def __getitem__(self, key):
        return self.data[key]

    @property
    def samples(self):
        return self.data["samples"]

    @property
    def originals(self):
        return self.data["originals"]

    def identity(self, name):
        return IdentitySpec(**self.data["identities"][name])

    def pose(self, index):
        p = self.data["poses"][index]
        return PoseSpec(rotation=p["rotation"], offset=tuple(p["offset"]),
                        scale=p["scale"])

    def background(self, index):
        b = self.data["backgrounds"][index]
        return BackgroundSpec(pattern=b["pattern"], palette=tuple(b["palette"]))

    def path(self, rel):
        return os.path.join(self.root, rel)

    def sample_factors(self, record):
        return FactorSpec(
            identity=self.identity(record["identity"]),
            pose=self.pose(record["pose_index"]),
            background=self.background(record["background_index"]),
        )

    def save(self):
        os.makedirs(self.root, exist_ok=True)
        final = os.path.join(self.root, MANIFEST_NAME)
        tmp = final + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self.data, fh, sort_keys=True, indent=1)
            fh.write("\n")
        os.replace(tmp, final)  # atomic publish

    @classmethod
    def load(cls, root):
        path = os.path.join(root, MANIFEST_NAME)
        if not os.path.exists(path):
            raise PersistenceError(f"corpus not found: no {MANIFEST_NAME} in {root}")
        with open(path, "r", encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise CorruptCorpusError(f"manifest unreadable: {exc}") from exc
        if data.get("schema_version") != MANIFEST_SCHEMA_VERSION:
            raise VersioningError(
                f"manifest schema {data.get('schema_version')} unsupported "
                f"(expected {MANIFEST_SCHEMA_VERSION})"
            )
        manifest = cls(data, root)
        manifest.validate()
        return manifest

    def validate(self):
        d = self.data
        if d["counts"]["samples"] != len(d["samples"]):
            raise CorruptCorpusError("manifest sample count inconsistent")
        for rec in d["samples"]:
            for rel in [rec["main_path"], rec["background_path"],
                        *[v["path"] for v in rec["variants"]]]:
                if not os.path.exists(self.path(rel)):
                    raise CorruptCorpusError(f"referenced file missing: {rel}")
        for orig in d["originals"]:
            if not os.path.exists(self.path(orig["reference_path"])):
                raise CorruptCorpusError(
                    f"referenced file missing: {orig['reference_path']}"
                )


def _enumerate_identities(n_total, n_heldout, rng):
    """Identity combos in round-robin family order; held-out ones reuse
    families already present in the training split."""
    n_train = n_total - n_heldout
    per_family = {}
    for fam in SHAPE_FAMILIES:
        combos = [(fam, c, t) for c in COLORS if c != "gray" for t in TEXTURES]
        order = rng.permutation(len(combos))
        per_family[fam] = [combos[i] for i in order]
    family_order = [SHAPE_FAMILIES[i] for i in rng.permutation(len(SHAPE_FAMILIES))]
    train = [per_family[family_order[i % len(family_order)]].pop(0)
             for i in range(n_train)]
    train_families = sorted({f for f, _, _ in train})
    heldout = [per_family[train_families[i % len(train_families)]].pop(0)
               for i in range(n_heldout)]
    return train, heldout


def _pick(rng, items, count, replace=False):
    idx = rng.choice(len(items), size=count, replace=replace)
    return [items[i] for i in idx]


def generate_corpus(config, seed, out_dir):
    """Generate the corpus tree under ``out_dir`` and return its Manifest.

    Each original (held-out identity, pose) expands into
    variants_per_original x backgrounds_per_subject samples; with the default
    10 x 10 that is exactly 100 samples per original.
    """
    n_ident = config["corpus.identities"]
    n_held = config["corpus.heldout_identities"]
    n_poses = config["corpus.poses"]
    n_bgs = config["corpus.backgrounds"]
    n_orig = config["corpus.originals"]
    n_var = config["corpus.variants_per_original"]
    n_bg_per = config["corpus.backgrounds_per_subject"]
    size = config["corpus.image_size"]

    if n_ident < 10 or n_poses < 5 or n_bgs < 10:
        raise ConfigurationError(
            "corpus needs >= 10 identities, >= 5 poses, >= 10 backgrounds; got "
            f"{n_ident}/{n_poses}/{n_bgs}"
        )
    if n_var < 4:
        raise ConfigurationError(
            "variants_per_original must be >= 4 to supply 3 distinct pose variants"
        )
    if n_var > n_ident - n_held:
        raise ConfigurationError(
            "variants_per_original exceeds the training identity pool"
        )
    if n_bg_per > n_bgs:
        raise ConfigurationError(
            "backgrounds_per_subject exceeds the background vocabulary"
        )

    rng = np.random.Generator(np.random.PCG64(seed))

    train_ids, held_ids = _enumerate_identities(n_ident, n_held, rng)
    identities = {}
    train_names, held_names = [], []
    for i, (fam, color, tex) in enumerate(train_ids + held_ids):
        name = f"id_{i:03d}"
        identities[name] = {"family": fam, "color": color, "texture": tex}
        (train_names if i < len(train_ids) else held_names).append(name)

    pose_space = [
        {"rotation": float(r), "offset": list(o), "scale": float(s)}
        for r in POSE_ROTATIONS for o in POSE_OFFSETS for s in POSE_SCALES
    ]
    poses = _pick(rng, pose_space, n_poses)

    bg_space = [
        {"pattern": p, "palette": list(pal)}
        for p in BG_PATTERNS for pal in DEFAULT_PALETTES
    ]
    backgrounds = _pick(rng, bg_space, n_bgs)

    for sub in ("images", "backgrounds", "variants", "refs"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    data = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "seed": seed,
        "image_size": size,
        "identities": identities,
        "train_identities": train_names,
        "heldout_identities": held_names,
        "poses": poses,
        "backgrounds": backgrounds,
        "originals": [],
        "samples": [],
        "counts": {},
    }
    manifest = Manifest(data, out_dir)

    # Background ground truth is shared: one subject-free render per
    # background in the vocabulary.
    bg_paths = []
    for b in range(n_bgs):
        factors = FactorSpec(
            identity=IdentitySpec(**identities[train_names[0]]),
            pose=manifest.pose(0),
            background=manifest.background(b),
        )
        rel = f"backgrounds/bg_{b:03d}.png"
        save_png(render(factors, with_subject=False, size=size),
                 os.path.join(out_dir, rel))
        bg_paths.append(rel)

    neutral = BackgroundSpec(pattern=NEUTRAL_BACKGROUND[0],
                             palette=NEUTRAL_BACKGROUND[1])

    pose_order = rng.permutation(n_poses)
    sample_index = 0
    for o in range(n_orig):
        held = held_names[o % len(held_names)]
        pose_index = int(pose_order[o % n_poses])
        pose = manifest.pose(pose_index)

        group = _pick(rng, train_names, n_var)
        bg_for_ref = int(rng.integers(n_bgs))
        ref_factors = FactorSpec(identity=manifest.identity(held), pose=pose,
                                 background=manifest.background(bg_for_ref))
        ref_rel = f"refs/ref_{o:03d}.png"
        save_png(render(ref_factors, size=size), os.path.join(out_dir, ref_rel))

        # One neutral-canvas render per (identity, pose) in the group; shared
        # by every sample that lists the identity as a pose variant.
        var_paths = {}
        for name in group:
            factors = FactorSpec(identity=manifest.identity(name), pose=pose,
                                 background=neutral)
            rel = f"variants/var_{o:03d}_{name}.png"
            save_png(render(factors, size=size), os.path.join(out_dir, rel))
            var_paths[name] = rel

        count = 0
        for gi, name in enumerate(group):
            bg_order = rng.permutation(n_bgs)[:n_bg_per]
            for b in bg_order:
                b = int(b)
                factors = FactorSpec(identity=manifest.identity(name), pose=pose,
                                     background=manifest.background(b))
                rel = f"images/main_{o:03d}_{gi:02d}_{b:03d}.png"
                save_png(render(factors, size=size), os.path.join(out_dir, rel))
                others = [group[(gi + k) % n_var] for k in (1, 2, 3)]
                data["samples"].append({
                    "index": sample_index,
                    "original": o,
                    "identity": name,
                    "pose_index": pose_index,
                    "background_index": b,
                    "main_path": rel,
                    "background_path": bg_paths[b],
                    "variants": [
                        {"identity": v, "path": var_paths[v],
                         "pose_index": pose_index}
                        for v in others
                    ],
                    "subject_token": identities[name]["family"],
                })
                sample_index += 1
                count += 1

        data["originals"].append({
            "identity": held,
            "pose_index": pose_index,
            "reference_path": ref_rel,
            "reference_background_index": bg_for_ref,
            "variant_identities": group,
            "sample_count": count,
        })

    data["counts"] = {
        "samples": sample_index,
        "per_original": [o["sample_count"] for o in data["originals"]],
    }
    manifest.save()
    return manifest


def load_sample(manifest, index):
    """Load one training record, re-validating its invariants."""
    samples = manifest.samples
    if not 0 <= index < len(samples):
        raise PersistenceError(
            f"sample index {index} out of range (corpus has {len(samples)})"
        )
    rec = samples[index]
    variants = rec["variants"]
    if len(variants) != 3:
        raise CorruptCorpusError(
            f"sample {index}: expected 3 pose variants, found {len(variants)}"
        )
    names = [v["identity"] for v in variants]
    if len(set(names)) != 3 or rec["identity"] in names:
        raise CorruptCorpusError(
            f"sample {index}: variant identities must be distinct from each "
            "other and from the main identity"
        )
    for v in variants:
        if v["pose_index"] != rec["pose_index"]:
            raise CorruptCorpusError(
                f"sample {index}: variant pose differs from main pose"
            )
    return CorpusSample(
        index=index,
        main_image=load_png(manifest.path(rec["main_path"])),
        background_image=load_png(manifest.path(rec["background_path"])),
        pose_variants=[load_png(manifest.path(v["path"])) for v in variants],
        factors=manifest.sample_factors(rec),
        variant_identities=names,
        prompt_subject_token=rec["subject_token"],
    )
