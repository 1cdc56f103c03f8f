"""Datasets, netpbm/PTT1 decoding, the synthetic latent-class generator,
restriction, and pre-training / episodic samplers.

Directory layout: ``root/<class_name>/<sample>.pgm|ppm|ptt1``; classes are
ordered lexicographically so indices are independent of filesystem
enumeration order. Pre-training batch sampling never consults labels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import streams
from .augment import AugmentationPipeline, bilinear_resize
from .checkpoint import load_ptt1
from .errors import ContractError, DataError

# Entropy for template construction; class templates are a pure function
# of the class index, independent of any user seed.
_TEMPLATE_ENTROPY = 0x50524F544F


@dataclass
class Dataset:
    images: np.ndarray  # [M,C,H,W] float32 in [0,1]
    labels: np.ndarray | None  # [M] int64, dense 0..C-1
    class_names: list[str] | None
    split: str = ""
    source: str = ""
    _class_ids: list[np.ndarray] | None = field(default=None, repr=False)

    def __len__(self):
        return self.images.shape[0]

    @property
    def n_classes(self) -> int:
        return 0 if self.labels is None else len(self.class_names)

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    @property
    def image_size(self) -> int:
        return self.images.shape[2]

    def class_indices(self) -> list[np.ndarray]:
        if self.labels is None:
            raise ContractError("dataset has no labels")
        if self._class_ids is None:
            self._class_ids = [np.flatnonzero(self.labels == c) for c in range(self.n_classes)]
        return self._class_ids


@dataclass
class Episode:
    n_ways: int
    k_shots: int
    support_images: np.ndarray  # [N*K,C,H,W]
    support_labels: np.ndarray  # episode-local, [N*K]
    query_images: np.ndarray  # [N*Q,C,H,W]
    query_labels: np.ndarray
    class_ids: np.ndarray  # original dataset classes, sampled order
    support_ids: np.ndarray
    query_ids: np.ndarray


@dataclass
class PretrainBatch:
    prototypes: np.ndarray  # [N,C,H,W]
    queries: np.ndarray  # [N,Q,C,H,W]
    indices: np.ndarray
    iteration: int


# ---------------------------------------------------------------------------
# netpbm decoding
# ---------------------------------------------------------------------------


def _read_netpbm(path: Path) -> np.ndarray:
    """Decode P2/P3/P5/P6 with maxval <= 255 to [C,H,W] float32 in [0,1]."""
    blob = path.read_bytes()
    if len(blob) < 2 or blob[0:1] != b"P" or blob[1:2] not in b"2356":
        raise DataError(f"{path}: not a supported PGM/PPM file")
    kind = blob[1:2]
    pos = 2
    fields: list[int] = []

    def next_token():
        nonlocal pos
        while pos < len(blob):
            ch = blob[pos : pos + 1]
            if ch == b"#":
                while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        return blob[start:pos]

    try:
        for _ in range(3):
            fields.append(int(next_token()))
    except ValueError as e:
        raise DataError(f"{path}: malformed netpbm header") from e
    width, height, maxval = fields
    if maxval < 1 or maxval > 255:
        raise DataError(f"{path}: unsupported maxval {maxval} (need 1..255)")
    channels = 3 if kind in (b"3", b"6") else 1
    n = width * height * channels
    if kind in (b"5", b"6"):
        pos += 1  # single whitespace byte after maxval
        raw = blob[pos : pos + n]
        if len(raw) < n:
            raise DataError(f"{path}: truncated pixel data")
        flat = np.frombuffer(raw, dtype=np.uint8).astype(np.float32)
    else:
        vals = blob[pos:].split()
        if len(vals) < n:
            raise DataError(f"{path}: truncated pixel data")
        try:
            flat = np.array([int(v) for v in vals[:n]], dtype=np.float32)
        except ValueError as e:
            raise DataError(f"{path}: malformed ASCII pixel data") from e
    img = flat.reshape(height, width, channels).transpose(2, 0, 1)
    return (img / maxval).astype(np.float32)


def write_pgm(path, img: np.ndarray):
    """Write a [1,H,W] or [H,W] float image in [0,1] as binary PGM."""
    arr = img[0] if img.ndim == 3 else img
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def write_ppm(path, img: np.ndarray):
    """Write a [3,H,W] float image in [0,1] as binary PPM."""
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    h, w, _ = data.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def _read_sample(path: Path, channels: int) -> np.ndarray:
    suffix = path.suffix.lower()
    if suffix in (".pgm", ".ppm"):
        img = _read_netpbm(path)
    elif suffix == ".ptt1":
        tensors = load_ptt1(path)
        if len(tensors) != 1:
            raise DataError(f"{path}: PTT1 sample files must hold exactly one tensor")
        img = next(iter(tensors.values()))
        if img.ndim == 2:
            img = img[None]
        if img.ndim != 3 or img.shape[0] not in (1, 3):
            raise DataError(f"{path}: expected [C,H,W] image tensor with C in {{1,3}}, got {img.shape}")
    else:
        raise DataError(f"{path}: unsupported sample format {suffix!r} (need .pgm/.ppm/.ptt1)")
    if img.shape[0] != channels:
        raise DataError(
            f"{path}: has {img.shape[0]} channel(s) but the dataset is configured for {channels}"
        )
    return img


SAMPLE_SUFFIXES = (".pgm", ".ppm", ".ptt1")


def load_directory_dataset(root_path, image_size: int, channels: int, split: str = "") -> Dataset:
    """Load ``root/<class>/<sample>.{pgm,ppm,ptt1}``, resized to image_size."""
    root = Path(root_path)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DataError(f"dataset root {root} has no class subdirectories")
    images = []
    labels = []
    names = []
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.suffix.lower() in SAMPLE_SUFFIXES)
        if not files:
            raise DataError(f"class directory {cdir} contains no samples")
        names.append(cdir.name)
        for f in files:
            img = _read_sample(f, channels)
            if img.shape[1:] != (image_size, image_size):
                img = bilinear_resize(img, image_size, image_size)
            images.append(np.clip(img, 0.0, 1.0))
            labels.append(label)
    return Dataset(
        images=np.stack(images).astype(np.float32),
        labels=np.array(labels, dtype=np.int64),
        class_names=names,
        split=split,
        source=str(root),
    )


def load_split_file(path) -> list[str]:
    """One class name per line; blank lines and '#' comments ignored."""
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            out.append(line)
    if not out:
        raise DataError(f"split file {path} names no classes")
    return out


def select_classes(dataset: Dataset, names: list[str], split: str = "") -> Dataset:
    """Subset to the named classes (labels re-densified, sorted name order)."""
    if dataset.labels is None:
        raise ContractError("select_classes needs a labeled dataset")
    known = {n: i for i, n in enumerate(dataset.class_names)}
    missing = [n for n in names if n not in known]
    if missing:
        raise DataError(f"split names unknown classes: {missing[:5]}")
    keep = sorted(set(names))
    return _subset_by_classes(dataset, [known[n] for n in keep], split or dataset.split)


def _subset_by_classes(dataset: Dataset, class_ids: list[int], split: str) -> Dataset:
    class_ids = sorted(class_ids)
    remap = {c: i for i, c in enumerate(class_ids)}
    mask = np.isin(dataset.labels, class_ids)
    ids = np.flatnonzero(mask)
    labels = np.array([remap[int(c)] for c in dataset.labels[ids]], dtype=np.int64)
    return Dataset(
        images=dataset.images[ids].copy(),
        labels=labels,
        class_names=[dataset.class_names[c] for c in class_ids],
        split=split,
        source=dataset.source,
    )


# ---------------------------------------------------------------------------
# synthetic latent-class generator
# ---------------------------------------------------------------------------


def class_template(class_index: int, image_size: int) -> np.ndarray:
    """Deterministic [1,S,S] template for a latent class.

    Templates depend only on (class_index, image_size): a primary
    geometric figure, a secondary accent square, and a low-frequency
    background ramp, all parameterized from a per-class stream.
    """
    rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence(entropy=_TEMPLATE_ENTROPY, spawn_key=(int(class_index),)))
    )
    s = image_size
    ax = np.linspace(-1.0, 1.0, s)
    xx, yy = np.meshgrid(ax, ax)
    img = np.zeros((s, s), dtype=np.float64)

    gx, gy = rng.uniform(-1.0, 1.0, 2)
    img += 0.12 + 0.10 * (gx * xx + gy * yy)

    cx, cy = rng.uniform(-0.35, 0.35, 2)
    r = rng.uniform(0.28, 0.5)
    d = np.hypot(xx - cx, yy - cy)
    kind = class_index % 4
    if kind == 0:
        fig = d < r
    elif kind == 1:
        fig = np.abs(d - r) < 0.14
    elif kind == 2:
        fig = (np.abs(xx - cx) < 0.14) | (np.abs(yy - cy) < 0.14)
    else:
        theta = rng.uniform(0.0, np.pi)
        freq = rng.uniform(4.0, 7.0)
        fig = np.sin(freq * (xx * np.cos(theta) + yy * np.sin(theta))) > 0.0
    img[fig] = 0.9

    qx, qy = rng.integers(0, max(1, s // 2), 2)
    qsz = max(2, s // 7)
    img[qy : qy + qsz, qx : qx + qsz] = rng.uniform(0.55, 0.75)

    return np.clip(img, 0.0, 1.0).astype(np.float32)[None]


def make_synthetic_dataset(
    n_classes: int,
    n_per_class: int,
    image_size: int = 16,
    noise_std: float = 0.05,
    seed: int = 0,
    class_offset: int = 0,
    split: str = "",
) -> Dataset:
    """Latent-class dataset: per-class template plus Gaussian pixel noise.

    ``class_offset`` shifts the template family, giving disjoint families
    for train/test splits.
    """
    if n_classes < 2:
        raise ContractError(f"make_synthetic_dataset needs >= 2 classes, got {n_classes}")
    images = np.empty((n_classes * n_per_class, 1, image_size, image_size), dtype=np.float32)
    labels = np.empty(n_classes * n_per_class, dtype=np.int64)
    for c in range(n_classes):
        template = class_template(c + class_offset, image_size)
        rng = streams.derive_rng(seed, streams.SYNTH, c + class_offset)
        for j in range(n_per_class):
            noise = rng.normal(0.0, noise_std, size=template.shape) if noise_std > 0 else 0.0
            images[c * n_per_class + j] = np.clip(template + noise, 0.0, 1.0)
            labels[c * n_per_class + j] = c
    names = [f"synth_{c + class_offset:03d}" for c in range(n_classes)]
    return Dataset(
        images=images,
        labels=labels,
        class_names=names,
        split=split,
        source=f"synthetic(n_classes={n_classes}, n_per_class={n_per_class}, "
        f"image_size={image_size}, noise_std={noise_std}, seed={seed}, offset={class_offset})",
    )


# ---------------------------------------------------------------------------
# restriction (class / image count)
# ---------------------------------------------------------------------------


def restrict(
    dataset: Dataset,
    n_classes: int | None = None,
    n_images: int | None = None,
    seed: int = 0,
) -> Dataset:
    """Keep a seeded random subset of classes and/or of images.

    Class restriction keeps whole classes; image restriction removes
    samples uniformly at random across all classes (classes emptied by
    the draw are dropped and labels re-densified).
    """
    out = dataset
    if n_classes is not None:
        if dataset.labels is None:
            raise ContractError("class restriction needs a labeled dataset")
        if not (1 <= n_classes <= out.n_classes):
            raise ContractError(f"cannot keep {n_classes} of {out.n_classes} classes")
        rng = streams.derive_rng(seed, streams.RESTRICT, 0)
        keep = rng.choice(out.n_classes, size=n_classes, replace=False)
        out = _subset_by_classes(out, [int(c) for c in keep], out.split)
    if n_images is not None:
        if not (1 <= n_images <= len(out)):
            raise ContractError(f"cannot keep {n_images} of {len(out)} images")
        rng = streams.derive_rng(seed, streams.RESTRICT, 1)
        ids = np.sort(rng.choice(len(out), size=n_images, replace=False))
        images = out.images[ids].copy()
        if out.labels is None:
            out = Dataset(images, None, None, out.split, out.source)
        else:
            labels = out.labels[ids]
            kept_classes = [int(c) for c in np.unique(labels)]
            remap = {c: i for i, c in enumerate(kept_classes)}
            labels = np.array([remap[int(c)] for c in labels], dtype=np.int64)
            out = Dataset(
                images,
                labels,
                [out.class_names[c] for c in kept_classes],
                out.split,
                out.source,
            )
    return out


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------


def sample_pretrain_batch(
    dataset: Dataset,
    n: int,
    q: int,
    pipeline: AugmentationPipeline,
    master_seed: int,
    iteration: int,
    indices: np.ndarray | None = None,
) -> PretrainBatch:
    """N distinct un-augmented prototypes plus Q augmented queries each.

    Labels are never consulted. Augmentation stream (i, q) is derived
    from (master_seed, iteration, i, q), so parallel augmentation would
    reproduce the sequential result bit for bit. ``indices`` overrides
    the uniform draw (epoch-shuffled iteration order).
    """
    if q < 1:
        raise ContractError(f"pre-training requires at least one query per prototype, got q={q}")
    if n > len(dataset):
        raise ContractError(f"batch size {n} exceeds dataset size {len(dataset)}")
    if pipeline.out_size is not None and pipeline.out_size != dataset.image_size:
        raise ContractError(
            f"pipeline output size {pipeline.out_size} != dataset image size {dataset.image_size}; "
            "prototypes and queries must share geometry"
        )
    if indices is None:
        rng = streams.derive_rng(master_seed, streams.BATCH, iteration)
        indices = rng.choice(len(dataset), size=n, replace=False)
    else:
        indices = np.asarray(indices)
        if len(indices) != n:
            raise ContractError(f"explicit indices have length {len(indices)}, expected {n}")
    prototypes = dataset.images[indices].copy()
    c, hh, ww = prototypes.shape[1:]
    queries = np.empty((n, q, c, hh, ww), dtype=np.float32)
    for i in range(n):
        for qq in range(q):
            rng_aug = streams.derive_rng(master_seed, streams.AUG, iteration, i, qq)
            queries[i, qq] = pipeline.apply(prototypes[i], rng_aug)
    return PretrainBatch(prototypes=prototypes, queries=queries, indices=indices, iteration=iteration)


def sample_episode(
    dataset: Dataset,
    n_ways: int,
    k_shots: int,
    q_queries: int,
    rng: np.random.Generator,
) -> Episode:
    """N-way K-shot episode with disjoint support/query, without replacement."""
    if dataset.labels is None:
        raise ContractError("episode sampling needs a labeled dataset")
    if dataset.n_classes < n_ways:
        raise ContractError(f"need {n_ways} classes for a {n_ways}-way episode, dataset has {dataset.n_classes}")
    per_class = dataset.class_indices()
    ways = rng.choice(dataset.n_classes, size=n_ways, replace=False)
    sup_ids, qry_ids = [], []
    for way in ways:
        ids = per_class[int(way)]
        need = k_shots + q_queries
        if len(ids) < need:
            raise ContractError(
                f"class {dataset.class_names[int(way)]!r} has {len(ids)} samples, "
                f"episode needs {need} ({k_shots} support + {q_queries} query)"
            )
        perm = rng.permutation(ids)
        sup_ids.append(perm[:k_shots])
        qry_ids.append(perm[k_shots:need])
    sup_ids = np.concatenate(sup_ids)
    qry_ids = np.concatenate(qry_ids)
    return Episode(
        n_ways=n_ways,
        k_shots=k_shots,
        support_images=dataset.images[sup_ids].copy(),
        support_labels=np.repeat(np.arange(n_ways, dtype=np.int64), k_shots),
        query_images=dataset.images[qry_ids].copy(),
        query_labels=np.repeat(np.arange(n_ways, dtype=np.int64), q_queries),
        class_ids=np.asarray(ways, dtype=np.int64),
        support_ids=sup_ids,
        query_ids=qry_ids,
    )
