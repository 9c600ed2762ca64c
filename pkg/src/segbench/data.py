"""Synthetic segmentation datasets, SNR noise, PGM datasets, crops and folds.

Generators draw the clean structure and the noise from separate seeded
streams, so one seed yields identical masks and clean images at every SNR.
"""
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigError, FormatError


@dataclass
class SampleSet:
    images: list
    masks: list
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.images)

    def subset(self, indices):
        indices = list(indices)
        meta = dict(self.meta)
        for key in ("inventory", "amplitudes", "clean", "sources"):
            if key in meta and meta[key] is not None:
                meta[key] = [meta[key][i] for i in indices]
        return SampleSet([self.images[i] for i in indices], [self.masks[i] for i in indices], meta)

    def stacked(self):
        """(images [N,C,H,W] float64, masks [N,1,H,W] float64)."""
        x = np.stack(self.images).astype(np.float64)
        y = np.stack(self.masks)[:, None].astype(np.float64)
        return x, y


def _clean_rng(seed):
    return np.random.default_rng([int(seed), 0])


def _finish(kind, seed, snr, images, masks, background, inventory, **extra):
    amplitudes = [float(np.max(np.abs(img - background))) for img in images]
    clean = SampleSet(
        [img[None].copy() for img in images],
        [m.astype(np.uint8) for m in masks],
        dict(
            kind=kind,
            seed=int(seed),
            snr=None,
            background=background,
            amplitudes=amplitudes,
            inventory=inventory,
            **extra,
        ),
    )
    if snr is None or math.isinf(snr):
        clean.meta["snr"] = None if snr is None else float(snr)
        return clean
    return with_noise(clean, snr, seed)


# --- Airy-ring spots -----------------------------------------------------------


def airy_profile(r, ring_amp, ring_radius, ring_sigma, center_amp, center_sigma):
    """Gaussian ring around a Gaussian centre bump, as a function of radius."""
    ring = ring_amp * np.exp(-((r - ring_radius) ** 2) / (2 * ring_sigma**2))
    bump = center_amp * np.exp(-(r**2) / (2 * center_sigma**2))
    return ring + bump


def gen_airy_spots(
    seed,
    size=128,
    n_images=8,
    spots_per_image_range=(4, 12),
    snr=10.0,
    ring_radius=(3.0, 4.5),
    ring_sigma=0.8,
    ring_amp=(0.15, 0.3),
    center_amp=(0.05, 0.15),
    center_sigma=1.0,
    mask_radius=1.5,
):
    """Sparse spots, each a bright-or-dark centre inside a bright-or-dark ring.

    The mask is a small disc at each spot centre; at the default density it
    covers well under 1% of a 128 x 128 image.
    """
    if size < 32:
        raise ConfigError("airy images need size >= 32")
    lo, hi = spots_per_image_range
    if lo < 0 or hi < lo:
        raise ConfigError(f"bad spots_per_image_range {spots_per_image_range}")
    margin = mask_radius + 1.0
    min_sep = 2 * (ring_radius[1] + 2 * ring_sigma)
    usable = (size - 2 * margin) ** 2
    # hexagonal packing bound for discs of diameter min_sep
    if hi * math.pi * (min_sep / 2) ** 2 > 0.9069 * usable:
        raise ConfigError(f"{hi} spots with separation {min_sep:.1f} px cannot fit in a {size} px image")

    rng = _clean_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    background = 0.5
    images, masks, inventory = [], [], []
    for _ in range(n_images):
        n_spots = int(rng.integers(lo, hi + 1))
        centres = []
        for _ in range(n_spots):
            for _attempt in range(2000):
                c = rng.uniform(margin, size - 1 - margin, size=2)
                if all(math.dist(c, o) >= min_sep for o in centres):
                    centres.append(c)
                    break
            else:
                raise ConfigError(f"could not place {n_spots} separated spots in a {size} px image")
        img = np.full((size, size), background)
        mask = np.zeros((size, size), dtype=bool)
        spots = []
        for cy, cx in centres:
            spot = dict(
                cy=float(cy),
                cx=float(cx),
                ring_amp=float(rng.choice([-1.0, 1.0]) * rng.uniform(*ring_amp)),
                ring_radius=float(rng.uniform(*ring_radius)),
                ring_sigma=float(ring_sigma),
                center_amp=float(rng.choice([-1.0, 1.0]) * rng.uniform(*center_amp)),
                center_sigma=float(center_sigma),
            )
            r = np.hypot(yy - cy, xx - cx)
            img += airy_profile(
                r,
                spot["ring_amp"],
                spot["ring_radius"],
                spot["ring_sigma"],
                spot["center_amp"],
                spot["center_sigma"],
            )
            mask |= r <= mask_radius
            spots.append(spot)
        images.append(img)
        masks.append(mask)
        inventory.append(spots)
    return _finish("airy", seed, snr, images, masks, background, inventory, mask_radius=mask_radius)


# --- fluorescent blobs with distractors -------------------------------------------


def _stamp_gaussian(shape, cy, cx, sy, sx, theta):
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    ct, st = math.cos(theta), math.sin(theta)
    u = ct * dx + st * dy
    v = -st * dx + ct * dy
    return np.exp(-0.5 * ((u / sx) ** 2 + (v / sy) ** 2))


def gen_blob_cells(
    seed,
    size=128,
    n_images=8,
    snr=10.0,
    n_targets=(3, 8),
    n_filaments=(1, 3),
    n_bright=(1, 4),
    background=0.1,
    target_amp=(0.2, 0.6),
    distractor_amp=(0.55, 0.85),
):
    """Target cells among bright filaments and small bright non-target blobs.

    Targets are anisotropic Gaussians masked at half their peak. Distractors
    are as bright or brighter than targets and are never in the mask, so
    intensity alone does not separate the classes.
    """
    if size < 32:
        raise ConfigError("blob images need size >= 32")
    rng = _clean_rng(seed)
    images, masks, inventory = [], [], []
    shape = (size, size)
    for _ in range(n_images):
        targets_layer = np.zeros(shape)
        target_mask = np.zeros(shape, dtype=bool)
        targets = []
        for _ in range(int(rng.integers(n_targets[0], n_targets[1] + 1))):
            t = dict(
                cy=float(rng.uniform(4, size - 5)),
                cx=float(rng.uniform(4, size - 5)),
                sy=float(rng.uniform(1.5, 3.5)),
                sx=float(rng.uniform(1.5, 3.5)),
                theta=float(rng.uniform(0, math.pi)),
                amp=float(rng.uniform(*target_amp)),
            )
            g = _stamp_gaussian(shape, t["cy"], t["cx"], t["sy"], t["sx"], t["theta"])
            targets_layer = np.maximum(targets_layer, t["amp"] * g)
            target_mask |= g >= 0.5
            targets.append(t)

        distractors_layer = np.zeros(shape)
        distractors = []
        for _ in range(int(rng.integers(n_filaments[0], n_filaments[1] + 1))):
            amp = float(rng.uniform(*distractor_amp))
            y, x = rng.uniform(0, size, size=2)
            angle = rng.uniform(0, 2 * math.pi)
            pts = []
            for _ in range(int(rng.integers(30, 80))):
                pts.append((y, x))
                angle += rng.normal(0, 0.3)
                y += math.sin(angle)
                x += math.cos(angle)
                if not (0 <= y < size and 0 <= x < size):
                    break
            layer = np.zeros(shape)
            for py, px in pts:
                layer = np.maximum(layer, _stamp_gaussian(shape, py, px, 0.7, 0.7, 0.0))
            distractors_layer = np.maximum(distractors_layer, amp * layer)
            distractors.append(dict(kind="filament", amp=amp, points=[list(p) for p in pts]))
        for _ in range(int(rng.integers(n_bright[0], n_bright[1] + 1))):
            d = dict(
                kind="bright_blob",
                cy=float(rng.uniform(2, size - 3)),
                cx=float(rng.uniform(2, size - 3)),
                sigma=float(rng.uniform(0.8, 1.2)),
                amp=float(rng.uniform(*distractor_amp)),
            )
            g = _stamp_gaussian(shape, d["cy"], d["cx"], d["sigma"], d["sigma"], 0.0)
            distractors_layer = np.maximum(distractors_layer, d["amp"] * g)
            distractors.append(d)

        footprint = distractors_layer >= 0.05
        img = np.clip(background + targets_layer + distractors_layer, 0.0, 1.0)
        images.append(img)
        masks.append(target_mask & ~footprint)
        inventory.append(dict(targets=targets, distractors=distractors, distractor_footprint=footprint))
    return _finish("blobs", seed, snr, images, masks, background, inventory)


# --- branching vessels --------------------------------------------------------------


def _segment_distance(py, px, a, b):
    ay, ax = a
    by, bx = b
    vy, vx = by - ay, bx - ax
    denom = vy * vy + vx * vx
    if denom == 0:
        return np.hypot(py - ay, px - ax)
    t = np.clip(((py - ay) * vy + (px - ax) * vx) / denom, 0.0, 1.0)
    return np.hypot(py - (ay + t * vy), px - (ax + t * vx))


def polyline_distance(shape, points):
    """Distance from every pixel centre to a polyline."""
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]].astype(np.float64)
    dist = np.full(shape, np.inf)
    if len(points) == 1:
        return np.hypot(yy - points[0][0], xx - points[0][1])
    for a, b in zip(points[:-1], points[1:]):
        dist = np.minimum(dist, _segment_distance(yy, xx, a, b))
    return dist


def gen_vessel_tree(
    seed,
    size=128,
    n_images=8,
    snr=10.0,
    n_roots=2,
    levels=3,
    root_width=(2.5, 3.5),
    width_decay=0.7,
    contrast=0.35,
):
    """Dark branching vessels on a textured bright background.

    Each root starts at the image border and walks inward; every branch
    spawns two children with narrower width until ``levels`` is reached. The
    mask is the union of the branch footprints (radius at least 1 px).
    """
    if size < 32:
        raise ConfigError("vessel images need size >= 32")
    if n_roots < 0 or levels < 0:
        raise ConfigError("n_roots and levels must be non-negative")
    rng = _clean_rng(seed)
    shape = (size, size)
    background = 0.6
    images, masks, inventory = [], [], []

    def walk(y, x, angle, width, level, branches):
        length = size * rng.uniform(0.25, 0.45) * (0.75**level)
        pts = [(y, x)]
        for _ in range(max(2, int(length))):
            angle += rng.normal(0, 0.12)
            ny, nx = y + math.sin(angle), x + math.cos(angle)
            if not (0 <= ny <= size - 1 and 0 <= nx <= size - 1):
                break
            y, x = ny, nx
            pts.append((y, x))
        branches.append(dict(level=level, width=width, points=pts))
        if level < levels and len(pts) > 2:
            for sign in (-1.0, 1.0):
                turn = sign * rng.uniform(0.35, 0.8)
                walk(y, x, angle + turn, width * width_decay, level + 1, branches)

    for _ in range(n_images):
        texture = ndimage.gaussian_filter(rng.normal(size=shape), 4.0)
        texture *= 0.05 / (np.abs(texture).max() + 1e-12)
        branches = []
        for _ in range(n_roots):
            side = int(rng.integers(4))
            u = rng.uniform(0.2, 0.8) * (size - 1)
            y, x, angle = [(0.0, u, math.pi / 2), (size - 1.0, u, -math.pi / 2), (u, 0.0, 0.0), (u, size - 1.0, math.pi)][side]
            walk(y, x, angle + rng.normal(0, 0.3), rng.uniform(*root_width), 0, branches)
        profile = np.zeros(shape)
        mask = np.zeros(shape, dtype=bool)
        for br in branches:
            radius = max(br["width"] / 2.0, 1.0)
            dist = polyline_distance(shape, br["points"])
            footprint = dist <= radius
            br["radius"] = radius
            profile = np.maximum(profile, np.clip(radius + 0.5 - dist, 0.0, 1.0))
            mask |= footprint
        img = np.clip(background + texture - contrast * profile, 0.0, 1.0)
        images.append(img)
        masks.append(mask)
        inventory.append(dict(branches=branches))
    return _finish("vessels", seed, snr, images, masks, background, inventory)


GENERATORS = {"airy": gen_airy_spots, "blobs": gen_blob_cells, "vessels": gen_vessel_tree}


# --- noise --------------------------------------------------------------------------


def add_noise_snr(image, snr, seed=0, amplitude=1.0, clip=True):
    """Add Gaussian noise with standard deviation ``amplitude / snr``.

    ``amplitude`` is the peak absolute deviation of the clean signal from its
    background. ``snr=inf`` returns an unchanged copy.
    """
    if not snr > 0:
        raise ConfigError(f"snr must be positive, got {snr}")
    image = np.asarray(image, dtype=np.float64)
    if math.isinf(snr):
        return image.copy()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    noisy = image + rng.normal(0.0, amplitude / snr, size=image.shape)
    return np.clip(noisy, 0.0, 1.0) if clip else noisy


def with_noise(clean, snr, seed):
    """Noisy copy of a clean SampleSet; image i uses noise stream (seed, 1, i)."""
    if snr is None or math.isinf(snr):
        return clean
    images = [
        add_noise_snr(img, snr, np.random.default_rng([int(seed), 1, i]), amplitude=amp)
        for i, (img, amp) in enumerate(zip(clean.images, clean.meta["amplitudes"]))
    ]
    meta = dict(clean.meta, snr=float(snr), clean=list(clean.images), noise_seed=int(seed))
    return SampleSet(images, [m.copy() for m in clean.masks], meta)


# --- PGM datasets -----------------------------------------------------------------


def write_pgm(path, array, comment=None):
    """Write an 8-bit binary (P5) PGM."""
    array = np.asarray(array)
    if array.ndim != 2:
        raise FormatError(f"PGM needs a 2-D array, got shape {array.shape}")
    header = b"P5\n"
    if comment:
        for line in str(comment).splitlines():
            header += b"# " + line.encode() + b"\n"
    header += f"{array.shape[1]} {array.shape[0]}\n255\n".encode()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(array, dtype=np.uint8).tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(blob):
            raise FormatError(f"{path}: truncated PGM header")
        if blob[pos : pos + 1] == b"#":
            end = blob.find(b"\n", pos)
            pos = len(blob) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace() and blob[pos : pos + 1] != b"#":
            pos += 1
        tokens.append(blob[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: expected binary PGM magic P5, got {tokens[0][:8]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path}: malformed PGM header") from None
    if width <= 0 or height <= 0 or not 0 < maxval <= 255:
        raise FormatError(f"{path}: unsupported PGM geometry or maxval ({width}x{height}, {maxval})")
    pos += 1  # single whitespace after maxval
    data = blob[pos : pos + width * height]
    if len(data) != width * height:
        raise FormatError(f"{path}: expected {width * height} pixel bytes, found {len(data)}")
    arr = np.frombuffer(data, dtype=np.uint8).reshape(height, width)
    if maxval != 255:
        arr = np.round(arr.astype(np.float64) * 255.0 / maxval).astype(np.uint8)
    return arr


def _stems(folder):
    if not os.path.isdir(folder):
        return {}
    return {os.path.splitext(f)[0]: os.path.join(folder, f) for f in os.listdir(folder) if f.endswith(".pgm")}


def load_samples(dir_path):
    """Load ``images/NAME.pgm`` + ``masks/NAME.pgm`` pairs, sorted by NAME."""
    images = _stems(os.path.join(dir_path, "images"))
    masks = _stems(os.path.join(dir_path, "masks"))
    for name in sorted(set(images) ^ set(masks)):
        side = "masks" if name in images else "images"
        raise FormatError(f"{name}: no matching {side}/{name}.pgm")
    if not images:
        raise FormatError(f"{dir_path}: no images/*.pgm found")
    names = sorted(images)
    xs, ys = [], []
    for name in names:
        img = read_pgm(images[name])
        mask = read_pgm(masks[name])
        if img.shape != mask.shape:
            raise FormatError(f"{name}: image {img.shape} and mask {mask.shape} differ")
        xs.append(img[None].astype(np.float64) / 255.0)
        ys.append((mask > 127).astype(np.uint8))
    return SampleSet(xs, ys, dict(kind="dir", path=str(dir_path), names=names, seed=None, snr=None))


def save_samples(sample_set, dir_path, comment=None):
    os.makedirs(os.path.join(dir_path, "images"), exist_ok=True)
    os.makedirs(os.path.join(dir_path, "masks"), exist_ok=True)
    names = sample_set.meta.get("names") or [f"{i:04d}" for i in range(len(sample_set))]
    for name, img, mask in zip(names, sample_set.images, sample_set.masks):
        if img.shape[0] != 1:
            raise FormatError("only single-channel images can be written as PGM")
        write_pgm(os.path.join(dir_path, "images", name + ".pgm"), to_uint8(img[0]), comment)
        write_pgm(os.path.join(dir_path, "masks", name + ".pgm"), np.where(mask > 0, 255, 0), comment)


def to_uint8(image):
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


# --- crops and folds -----------------------------------------------------------------


def crop_patches(sample_set, crop, per_image, seed):
    """``per_image`` uniformly placed crop x crop windows from every image."""
    rng = np.random.default_rng(seed)
    images, masks, sources = [], [], []
    for i, (img, mask) in enumerate(zip(sample_set.images, sample_set.masks)):
        h, w = mask.shape
        if crop > h or crop > w or crop < 1:
            raise ConfigError(f"crop {crop} does not fit image {h}x{w}")
        for _ in range(per_image):
            y = int(rng.integers(0, h - crop + 1))
            x = int(rng.integers(0, w - crop + 1))
            images.append(img[:, y : y + crop, x : x + crop].copy())
            masks.append(mask[y : y + crop, x : x + crop].copy())
            sources.append((i, y, x))
    meta = {k: v for k, v in sample_set.meta.items() if k not in ("inventory", "amplitudes", "clean", "names")}
    meta.update(crop=crop, sources=sources)
    return SampleSet(images, masks, meta)


@dataclass(frozen=True)
class Fold:
    train: tuple
    val: tuple
    test: tuple


@dataclass(frozen=True)
class FoldPlan:
    k: int
    folds: tuple
    subsets: tuple


def make_folds(n_items, k=5, seed=0):
    """Shuffle, chunk into k subsets (larger ones first), rotate test/validation.

    Fold f tests on subset f, validates on subset (f + 1) mod k and trains on
    the remaining k - 2 subsets.
    """
    if k < 3:
        raise ConfigError("need at least 3 folds (train, validation, test)")
    if n_items < k:
        raise ConfigError(f"{n_items} items cannot fill {k} folds")
    perm = np.random.default_rng(seed).permutation(n_items)
    base, extra = divmod(n_items, k)
    subsets, start = [], 0
    for f in range(k):
        size = base + (1 if f < extra else 0)
        subsets.append(tuple(sorted(int(i) for i in perm[start : start + size])))
        start += size
    folds = []
    for f in range(k):
        v = (f + 1) % k
        train = tuple(sorted(i for g in range(k) if g not in (f, v) for i in subsets[g]))
        folds.append(Fold(train, subsets[v], subsets[f]))
    return FoldPlan(k, tuple(folds), tuple(subsets))
