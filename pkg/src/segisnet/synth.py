"""Deterministic synthetic longitudinal phantoms with known ground truth.

Each phantom holds three pairs of tube-shaped structures laid out like the
cingulum / forceps tracts: channel 0 runs along y (left/right pair), channel
1 along x (anterior/posterior pair), channel 2 along z (left/right pair).
The tube directions are encoded in a six-component tensor image, so the
channels are separable by orientation; tubes of different channels cross and
overlap.  A scalar FA-like map with smooth background texture drives
registration.

A pair is built by warping a source phantom through a smooth random
displacement composed with a small random affine, then adding independent
noise on each side.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .metrics import dice_coefficient
from .volume import (
    AffineTransform,
    Volume,
    atomic_write_text,
    load_affine,
    load_volume,
    normalize_image,
    read_header,
    save_affine,
    save_volume,
)
from .warp import compose, trilinear_warp

MAX_STRUCTURES = 3
EDGE_WIDTH = 0.5
CHECK_DICE = 0.95
MAX_ATTEMPTS = 5


@dataclass(frozen=True)
class SynthConfig:
    dims: tuple[int, int, int] = (24, 40, 24)
    n_structures: int = 3
    image_channels: int = 6
    smooth_sigma: float = 4.0
    max_displacement: float = 2.0
    rotation_deg: float = 3.0
    translation_vox: float = 1.0
    scale_jitter: float = 0.02
    noise_std: float = 0.02
    tube_radius: float = 2.5
    texture_sigma: float = 1.0
    fa_texture: float = 0.3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be three positive ints, got {self.dims}")
        if self.max_displacement < 0:
            raise ValueError("max_displacement must be >= 0")
        if self.smooth_sigma <= 0:
            raise ValueError("smooth_sigma must be > 0")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.image_channels != 6:
            raise ValueError("tensor image must have 6 channels")

    def check_depth(self, depth):
        step = 2**depth
        if any(d % step for d in self.dims):
            raise ValueError(f"dims {self.dims} not divisible by 2**{depth}")


@dataclass
class Phantom:
    tensor: np.ndarray  # (X, Y, Z, 6), un-normalized
    fa: np.ndarray  # (X, Y, Z, 1)
    md: np.ndarray  # (X, Y, Z, 1)
    labels: np.ndarray  # (X, Y, Z, K) binary
    density: np.ndarray  # (X, Y, Z, K) soft membership in [0, 1]
    layout: list = field(default_factory=list)


@dataclass
class SynthPair:
    pair_id: int
    subject: str
    img_s: np.ndarray
    img_t: np.ndarray
    seg_img_s: np.ndarray
    seg_img_t: np.ndarray
    seg_s: np.ndarray
    seg_t: np.ndarray
    affine: AffineTransform
    u_gt: np.ndarray | None = None
    density_s: np.ndarray | None = None
    density_t: np.ndarray | None = None
    md_s: np.ndarray | None = None
    md_t: np.ndarray | None = None
    seed: int | None = None
    check_dice: float | None = None

    def reversed(self):
        """The same pair with source and target roles swapped (no ground-truth field)."""
        return SynthPair(
            self.pair_id, self.subject,
            self.img_t, self.img_s, self.seg_img_t, self.seg_img_s, self.seg_t, self.seg_s,
            self.affine.inverse(), None,
            self.density_t, self.density_s, self.md_t, self.md_s, self.seed, self.check_dice,
        )


# Channel templates: axis the tubes run along, axis the pair is split along.
_TEMPLATES = [
    {"along": 1, "split": 0, "semantics": "lr", "offset": (0.30, 0.50, 0.62)},
    {"along": 0, "split": 1, "semantics": "ap", "offset": (0.50, 0.20, 0.55)},
    {"along": 2, "split": 0, "semantics": "lr", "offset": (0.30, 0.55, 0.50)},
]

CHANNEL_SEMANTICS = tuple(t["semantics"] for t in _TEMPLATES)


def _layout(cfg: SynthConfig, rng: np.random.Generator):
    """Tube centre-lines for every structure, jittered per seed."""
    if cfg.n_structures < 1 or cfg.n_structures > MAX_STRUCTURES:
        raise ValueError(f"phantom supports 1..{MAX_STRUCTURES} structures, got {cfg.n_structures}")
    if min(cfg.dims) < 8 or cfg.tube_radius * 4 > min(cfg.dims):
        raise ValueError(f"structures cannot fit in dims {cfg.dims} with radius {cfg.tube_radius}")
    dims = np.array(cfg.dims, dtype=float)
    tubes = []
    for k in range(cfg.n_structures):
        t = _TEMPLATES[k]
        along, split = t["along"], t["split"]
        base = np.array(t["offset"]) * (dims - 1)
        base += rng.uniform(-0.03, 0.03, size=3) * dims
        extent = 0.5 * (dims[along] - 1) * rng.uniform(0.70, 0.80)
        mid = 0.5 * (dims[along] - 1)
        curve_axis = 3 - along - split
        bend = rng.uniform(0.05, 0.10) * dims[curve_axis]
        gap = (dims[split] - 1) - 2 * base[split]
        for side in (0, 1):
            centre = base.copy()
            centre[split] = base[split] + side * gap
            tubes.append({
                "channel": k,
                "along": along,
                "curve_axis": curve_axis,
                "centre": centre.tolist(),
                "lo": mid - extent,
                "hi": mid + extent,
                "bend": bend,
                "half_length": extent,
            })
    return tubes


def _tube_distance(tube, pts):
    """Distance from each point (..., 3) to an arched tube centre-line."""
    along = tube["along"]
    c = np.array(tube["centre"])
    a = pts[..., along]
    a_clip = np.clip(a, tube["lo"], tube["hi"])
    mid = 0.5 * (tube["lo"] + tube["hi"])
    rel = (a_clip - mid) / max(tube["half_length"], 1e-6)
    # arch: centre-line bows along curve_axis
    offset = np.zeros(pts.shape[:-1] + (3,))
    offset[..., tube["curve_axis"]] = tube["bend"] * (1 - rel**2)
    line = c + offset
    d2 = (a - a_clip) ** 2
    for axis in range(3):
        if axis != along:
            d2 = d2 + (pts[..., axis] - line[..., axis]) ** 2
    return np.sqrt(d2)


def structure_fields(cfg: SynthConfig, tubes, pts):
    """Binary labels and soft membership for every channel at points ``pts``."""
    k = cfg.n_structures
    labels = np.zeros(pts.shape[:-1] + (k,))
    soft = np.zeros(pts.shape[:-1] + (k,))
    for tube in tubes:
        d = _tube_distance(tube, pts)
        ch = tube["channel"]
        labels[..., ch] = np.maximum(labels[..., ch], d <= cfg.tube_radius)
        m = 1.0 / (1.0 + np.exp(-(cfg.tube_radius - d) / EDGE_WIDTH))
        soft[..., ch] = np.maximum(soft[..., ch], m)
    return labels, soft


def _texture(shape, sigma, rng):
    t = gaussian_filter(rng.normal(size=shape), sigma, mode="nearest")
    return t / max(t.std(), 1e-12)


_TENSOR_INDEX = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)]


def generate_phantom(cfg: SynthConfig, seed: int) -> Phantom:
    """Noise-free source phantom; noise is added when a pair is assembled."""
    rng = np.random.default_rng(seed)
    tubes = _layout(cfg, rng)
    dims = cfg.dims
    pts = np.stack(np.meshgrid(*[np.arange(d, dtype=float) for d in dims], indexing="ij"), axis=-1)
    labels, soft = structure_fields(cfg, tubes, pts)
    tex_fa = _texture(dims, cfg.texture_sigma, rng)
    tex_md = _texture(dims, cfg.texture_sigma, rng)
    tex_iso = _texture(dims, cfg.texture_sigma, rng)

    tensor = np.zeros(dims + (6,))
    iso = 0.3 + 0.05 * tex_iso
    for c, (i, j) in enumerate(_TENSOR_INDEX):
        if i == j:
            tensor[..., c] = iso
    for k in range(cfg.n_structures):
        d = np.zeros(3)
        d[_TEMPLATES[k]["along"]] = 1.0
        for c, (i, j) in enumerate(_TENSOR_INDEX):
            tensor[..., c] += 0.8 * soft[..., k] * d[i] * d[j]
    cover = soft.max(axis=-1)
    fa = np.clip(0.25 + cfg.fa_texture * tex_fa + 0.45 * cover, 0.0, 1.0)[..., None]
    md = np.clip(0.75 + 0.05 * tex_md - 0.15 * cover, 0.05, None)[..., None]
    return Phantom(tensor, fa, md, labels, soft, tubes)


def generate_deformation(cfg: SynthConfig, seed: int):
    """Smooth random displacement (max norm = ``max_displacement``) and a jittered affine."""
    rng = np.random.default_rng(seed)
    dims = cfg.dims
    noise = rng.normal(size=dims + (3,))
    u = np.stack([gaussian_filter(noise[..., c], cfg.smooth_sigma, mode="wrap") for c in range(3)], axis=-1)
    peak = np.sqrt((u**2).sum(axis=-1)).max()
    if cfg.max_displacement == 0 or peak == 0:
        u = np.zeros_like(u)
    else:
        u = u * (cfg.max_displacement / peak)

    angles = np.deg2rad(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg, size=3))
    scale = 1.0 + rng.uniform(-cfg.scale_jitter, cfg.scale_jitter)
    shift = rng.uniform(-cfg.translation_vox, cfg.translation_vox, size=3)
    cx, cy, cz = np.cos(angles)
    sx, sy, sz = np.sin(angles)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    lin = scale * (rz @ ry @ rx)
    centre = (np.array(dims, dtype=float) - 1) / 2
    m = np.eye(4)
    m[:3, :3] = lin
    m[:3, 3] = centre - lin @ centre + shift
    if cfg.rotation_deg == 0 and cfg.scale_jitter == 0 and cfg.translation_vox == 0:
        m = np.eye(4)
    return u, AffineTransform(m)


def _noisy(x, std, rng):
    if std == 0:
        return x.copy()
    return x + rng.normal(scale=std, size=x.shape)


def make_pair(cfg: SynthConfig, seed: int, pair_id: int = 0, subject: str | None = None) -> SynthPair:
    """Source phantom, its deformed follow-up, and the ground-truth transform."""
    last_dice = None
    for attempt in range(MAX_ATTEMPTS):
        sub = int(np.random.SeedSequence([seed, attempt]).generate_state(1)[0])
        p_seed, d_seed, n_seed = (int(s) for s in np.random.SeedSequence(sub).generate_state(3))
        ph = generate_phantom(cfg, p_seed)
        u, affine = generate_deformation(cfg, d_seed)
        coords = compose(affine, u)
        # partial-volume maps are warped, then thresholded
        seg_t = (trilinear_warp(ph.density, coords) >= 0.5).astype(np.float64)
        exact_t, _ = structure_fields(cfg, ph.layout, coords)
        dice = min(
            dice_coefficient(seg_t, exact_t, k)
            for k in range(cfg.n_structures)
        )
        last_dice = dice
        if dice >= CHECK_DICE:
            break
    else:
        raise RuntimeError(f"construction check failed for seed {seed}: Dice {last_dice:.3f}")

    rng = np.random.default_rng(n_seed)
    tensor_t = trilinear_warp(ph.tensor, coords)
    fa_t = trilinear_warp(ph.fa, coords)
    md_t = trilinear_warp(ph.md, coords)
    density_t = trilinear_warp(ph.density, coords)
    std = cfg.noise_std
    f32 = np.float32
    return SynthPair(
        pair_id=pair_id,
        subject=subject or f"subj{pair_id:03d}",
        img_s=np.clip(_noisy(ph.fa, std, rng), 0, 1).astype(f32),
        img_t=np.clip(_noisy(fa_t, std, rng), 0, 1).astype(f32),
        seg_img_s=normalize_image(_noisy(ph.tensor, std, rng)).astype(f32),
        seg_img_t=normalize_image(_noisy(tensor_t, std, rng)).astype(f32),
        seg_s=ph.labels.astype(f32),
        seg_t=seg_t.astype(f32),
        affine=affine,
        u_gt=u.astype(f32),
        density_s=ph.density.astype(f32),
        density_t=density_t.astype(f32),
        md_s=np.clip(_noisy(ph.md, std, rng), 0.01, None).astype(f32),
        md_t=np.clip(_noisy(md_t, std, rng), 0.01, None).astype(f32),
        seed=seed,
        check_dice=float(dice),
    )


def pair_seeds(seed: int, n_pairs: int) -> list[int]:
    """Distinct per-pair seeds derived from the dataset seed."""
    states = np.random.SeedSequence(seed).generate_state(n_pairs, dtype=np.uint64)
    return [int(s) for s in states]


def assign_splits(n_pairs: int, val_fraction=0.15, test_fraction=0.15) -> list[str]:
    n_test = max(1, int(round(n_pairs * test_fraction))) if n_pairs >= 3 else 0
    n_val = max(1, int(round(n_pairs * val_fraction))) if n_pairs >= 3 else 0
    n_train = n_pairs - n_val - n_test
    if n_train < 1:
        raise ValueError(f"{n_pairs} pairs leave no training data")
    return ["train"] * n_train + ["val"] * n_val + ["test"] * n_test


_PAIR_VOLUMES = {
    "img_s": None, "img_t": None,
    "seg_img_s": None, "seg_img_t": None,
    "seg_s": None, "seg_t": None,
    "density_s": None, "density_t": None,
    "md_s": None, "md_t": None,
}


def write_dataset(out_dir, cfg: SynthConfig, n_pairs: int, val_fraction=0.15, test_fraction=0.15):
    """Generate ``n_pairs`` pairs under ``out_dir``; returns the manifest path."""
    if n_pairs < 1:
        raise ValueError("need at least one pair")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = pair_seeds(cfg.seed, n_pairs)
    splits = assign_splits(n_pairs, val_fraction, test_fraction)
    entries = []
    for i, (s, split) in enumerate(zip(seeds, splits)):
        pair = make_pair(cfg, s, pair_id=i)
        d = out / f"pair_{i:03d}"
        d.mkdir(exist_ok=True)
        for name in _PAIR_VOLUMES:
            save_volume(Volume(getattr(pair, name)), d / name)
        save_volume(Volume(pair.u_gt), d / "u_gt", field_kind="displacement-voxels")
        save_affine(pair.affine, d / "affine.json")
        pair_manifest = {
            "pair_id": i,
            "subject": pair.subject,
            "split": split,
            "seed": s,
            "construction_check_dice": pair.check_dice,
            "config": _cfg_dict(cfg),
        }
        atomic_write_text(d / "manifest.json", json.dumps(pair_manifest, indent=2) + "\n")
        entries.append({"pair_id": i, "dir": d.name, "subject": pair.subject, "split": split, "seed": s})
    manifest = {
        "config": _cfg_dict(cfg),
        "n_pairs": n_pairs,
        "channel_semantics": list(CHANNEL_SEMANTICS[: cfg.n_structures]),
        "pairs": entries,
    }
    path = out / "manifest.json"
    atomic_write_text(path, json.dumps(manifest, indent=2) + "\n")
    return path


def _cfg_dict(cfg):
    d = asdict(cfg)
    d["dims"] = list(cfg.dims)
    return d


def config_from_dict(d) -> SynthConfig:
    d = dict(d)
    if "dims" in d:
        d["dims"] = tuple(d["dims"])
    return replace(SynthConfig(), **d)


def load_pair(pair_dir) -> SynthPair:
    d = Path(pair_dir)
    with open(d / "manifest.json") as fh:
        meta = json.load(fh)
    arrays = {name: load_volume(d / name).data for name in _PAIR_VOLUMES}
    if read_header(d / "u_gt").get("field_kind") != "displacement-voxels":
        raise ValueError(f"{d / 'u_gt'} is not a displacement field")
    return SynthPair(
        pair_id=meta["pair_id"],
        subject=meta["subject"],
        affine=load_affine(d / "affine.json"),
        u_gt=load_volume(d / "u_gt").data,
        seed=meta["seed"],
        check_dice=meta["construction_check_dice"],
        **arrays,
    )


def load_dataset(data_dir):
    """Return ``(manifest, {split: [SynthPair, ...]})``."""
    data_dir = Path(data_dir)
    if not (data_dir / "manifest.json").exists():
        raise FileNotFoundError(f"no dataset manifest in {data_dir}")
    with open(data_dir / "manifest.json") as fh:
        manifest = json.load(fh)
    splits = {"train": [], "val": [], "test": []}
    for e in manifest["pairs"]:
        splits[e["split"]].append(load_pair(data_dir / e["dir"]))
    return manifest, splits
