"""Datasets (synthetic tiered mixtures, CSV, IDX) and checkpoint persistence."""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .nets import CELL_VARIANT, BaseModel, Selector

SPLITS = ("train", "val", "test")
CHECKPOINT_VERSION = 1


class DataFormatError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose (data, init, order, gumbel, search, ...)."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


@dataclass
class Dataset:
    features: np.ndarray  # [N, D] float64
    labels: np.ndarray  # [N] int64
    split: np.ndarray  # [N] of "train" / "val" / "test"
    num_classes: int
    provenance: str = ""
    tiers: np.ndarray | None = None  # [N] tier index, diagnostics only
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.split = np.asarray(self.split, dtype=object)
        self.validate()

    def validate(self) -> None:
        n = len(self.labels)
        if self.features.ndim != 2 or self.features.shape[0] != n or self.split.shape != (n,):
            raise DataFormatError(
                f"inconsistent sizes: features {self.features.shape}, labels {self.labels.shape}, split {self.split.shape}"
            )
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError(f"labels outside [0, {self.num_classes})")
        unknown = set(np.unique(self.split)) - set(SPLITS)
        if unknown:
            raise DataFormatError(f"unknown split tags {sorted(unknown)}")

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def indices(self, name: str) -> np.ndarray:
        return np.flatnonzero(self.split == name)

    def subset(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.indices(name)
        return self.features[idx], self.labels[idx]

    def sizes(self) -> dict[str, int]:
        return {s: int((self.split == s).sum()) for s in SPLITS}


def _assign_splits(n: int, sizes: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    if sum(sizes) != n:
        raise ValueError(f"split sizes {tuple(sizes)} do not add up to {n} samples")
    tags = np.empty(n, dtype=object)
    order = rng.permutation(n)
    start = 0
    for name, size in zip(SPLITS, sizes):
        tags[order[start : start + size]] = name
        start += size
    return tags


def _default_sizes(n: int) -> tuple[int, int, int]:
    n_val = int(round(0.1 * n))
    n_test = int(round(0.2 * n))
    return n - n_val - n_test, n_val, n_test


# per-tier spacing of the class means, in units of the within-cluster noise
TIER_SEPARATION = (6.0, 1.2, 0.7)


def gen_tiered(
    n_per_tier: int,
    tiers: int = 3,
    classes: int = 3,
    dim: int = 16,
    seed: int = 0,
    split_sizes: Sequence[int] | None = None,
    modes_per_class: int = 6,
    separation: Sequence[float] | None = None,
) -> Dataset:
    """Gaussian-mixture classification data stratified by hardness.

    Each tier lives in its own region of feature space. Inside a tier every class
    is a mixture of ``modes_per_class`` unit-variance Gaussians whose means are
    spread by the tier's separation: tier 1 is cleanly separable, later tiers
    overlap progressively. Labels cycle within each tier so per-class counts in a
    tier differ by at most one.
    """
    if n_per_tier <= 0 or tiers <= 0 or classes < 2 or not 2 <= dim <= 16 or modes_per_class <= 0:
        raise ValueError(
            f"invalid sizes: n_per_tier={n_per_tier} tiers={tiers} classes={classes} dim={dim} modes={modes_per_class}"
        )
    sep = tuple(separation) if separation is not None else _tier_separation(tiers)
    if len(sep) != tiers:
        raise ValueError(f"need {tiers} separation values, got {len(sep)}")
    rng = substream(seed, "data")
    feats, labels, tier_ids = [], [], []
    for k in range(tiers):
        anchor = np.zeros(dim)
        anchor[k % dim] = 12.0 * (1 + k // dim)
        anchor *= 1 if k % 2 == 0 else -1
        centers = anchor + sep[k] * rng.standard_normal((classes, modes_per_class, dim))
        y = np.arange(n_per_tier) % classes
        mode = rng.integers(0, modes_per_class, size=n_per_tier)
        x = centers[y, mode] + rng.standard_normal((n_per_tier, dim))
        feats.append(x)
        labels.append(y)
        tier_ids.append(np.full(n_per_tier, k))
    n = tiers * n_per_tier
    sizes = tuple(split_sizes) if split_sizes is not None else _default_sizes(n)
    split = _assign_splits(n, sizes, rng)
    provenance = (
        f"gen_tiered(n_per_tier={n_per_tier}, tiers={tiers}, classes={classes}, dim={dim}, seed={seed}, "
        f"modes_per_class={modes_per_class}, separation={list(sep)}, split_sizes={list(sizes)})"
    )
    return Dataset(
        features=np.concatenate(feats),
        labels=np.concatenate(labels),
        split=split,
        num_classes=classes,
        provenance=provenance,
        tiers=np.concatenate(tier_ids),
    )


def _tier_separation(tiers: int) -> tuple[float, ...]:
    if tiers == len(TIER_SEPARATION):
        return TIER_SEPARATION
    return tuple(np.geomspace(TIER_SEPARATION[0], TIER_SEPARATION[-1], tiers))


def _minmax(x: np.ndarray) -> np.ndarray:
    lo = x.min(axis=0)
    span = x.max(axis=0) - lo
    span[span == 0] = 1.0
    return (x - lo) / span


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_csv(
    path: str | Path,
    header: bool = False,
    split: str = "train",
    num_classes: int | None = None,
    scale: bool = True,
) -> Dataset:
    """Numeric feature columns followed by an integer label column."""
    path = Path(path)
    rows, labels = [], []
    width = None
    with open(path) as fh:
        lines = fh.read().splitlines()
    for lineno, line in enumerate(lines, start=1):
        if header and lineno == 1:
            continue
        if not line.strip():
            continue
        cells = [c.strip() for c in line.split(",")]
        if width is None:
            width = len(cells)
            if width < 2:
                raise DataFormatError(f"{path}:{lineno}: need at least one feature and a label")
        if len(cells) != width:
            raise DataFormatError(f"{path}:{lineno}: expected {width} columns, got {len(cells)}")
        try:
            values = [float(c) for c in cells[:-1]]
            label = float(cells[-1])
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: non-numeric cell ({exc})") from None
        if label != int(label) or label < 0:
            raise DataFormatError(f"{path}:{lineno}: label {cells[-1]!r} is not a non-negative integer")
        rows.append(values)
        labels.append(int(label))
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    x = np.asarray(rows)
    y = np.asarray(labels)
    k = num_classes if num_classes is not None else int(y.max()) + 1
    return Dataset(
        features=_minmax(x) if scale else x,
        labels=y,
        split=np.full(len(y), split, dtype=object),
        num_classes=k,
        provenance=f"csv:{path.name} sha256={file_digest(path)}",
    )


def save_csv(dataset: Dataset, path: str | Path, header: bool = False, split: str | None = None) -> None:
    idx = dataset.indices(split) if split else np.arange(len(dataset.labels))
    with open(path, "w") as fh:
        if header:
            cols = [f"x{i}" for i in range(dataset.dim)] + ["label"]
            fh.write(",".join(cols) + "\n")
        for i in idx:
            cells = [repr(float(v)) for v in dataset.features[i]] + [str(int(dataset.labels[i]))]
            fh.write(",".join(cells) + "\n")


_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def read_idx(path: str | Path) -> np.ndarray:
    """Parse an IDX file: two zero bytes, a type code, a rank byte, big-endian u32 dims."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: file too short for an IDX header ({len(raw)} bytes)")
    zero, code, rank = struct.unpack(">HBB", raw[:4])
    if zero != 0 or code not in _IDX_TYPES:
        raise DataFormatError(f"{path}: bad IDX magic {raw[:4].hex()} at offset 0")
    header_end = 4 + 4 * rank
    if len(raw) < header_end:
        raise DataFormatError(f"{path}: truncated dimension header at offset 4")
    dims = struct.unpack(f">{rank}I", raw[4:header_end])
    dtype = _IDX_TYPES[code]
    expected = int(np.prod(dims)) * dtype.itemsize
    body = raw[header_end:]
    if len(body) != expected:
        raise DataFormatError(f"{path}: payload at offset {header_end} has {len(body)} bytes, expected {expected}")
    return np.frombuffer(body, dtype=dtype).reshape(dims)


def write_idx(array: np.ndarray, path: str | Path) -> None:
    array = np.asarray(array)
    codes = {v.newbyteorder("="): k for k, v in _IDX_TYPES.items()}
    code = codes.get(array.dtype.newbyteorder("="))
    if code is None:
        raise DataFormatError(f"dtype {array.dtype} has no IDX type code")
    header = struct.pack(">HBB", 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.astype(_IDX_TYPES[code]).tobytes())


def load_idx(images_path: str | Path, labels_path: str | Path, split: str = "train", num_classes: int | None = None) -> Dataset:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim < 1 or labels.ndim != 1 or images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"image dims {images.shape} do not match label dims {labels.shape}")
    if images.shape[0] == 0:
        raise DataFormatError(f"{images_path}: no samples")
    x = images.reshape(images.shape[0], -1).astype(np.float64)
    x = x / 255.0 if images.dtype == np.dtype(">u1") else _minmax(x)
    y = labels.astype(np.int64)
    k = num_classes if num_classes is not None else int(y.max()) + 1
    return Dataset(
        features=x,
        labels=y,
        split=np.full(len(y), split, dtype=object),
        num_classes=k,
        provenance=f"idx:{Path(images_path).name} sha256={file_digest(images_path)};"
        f"{Path(labels_path).name} sha256={file_digest(labels_path)}",
    )


# checkpoints: <dir>/manifest.txt + <dir>/payload.bin (little-endian float32, row-major)


def save_checkpoint(
    path: str | Path,
    models: Sequence[BaseModel],
    selector: Selector | None = None,
    seed: int | None = None,
    stage: int | None = None,
    hyperparameters: dict | None = None,
) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if not models:
        raise CheckpointError("nothing to save")
    ref = models[0]
    arrays: list[tuple[str, np.ndarray]] = []
    for i, m in enumerate(models):
        if (m.input_dim, m.num_classes, m.hidden) != (ref.input_dim, ref.num_classes, ref.hidden):
            raise CheckpointError(f"model {i} architecture differs from model 0")
        arrays += [(f"model.{i}.{name}", p.data) for name, p in m.named_parameters()]
    if selector is not None:
        arrays += [(f"selector.{name}", p.data) for name, p in selector.named_parameters()]
    lines = [
        f"format_version = {CHECKPOINT_VERSION}",
        "payload = payload.bin",
        "dtype = float32-le",
        "precision = computed in float64, stored as float32; reload is bit-exact for float32-rounded parameters",
        f"num_models = {len(models)}",
        f"input_dim = {ref.input_dim}",
        f"num_classes = {ref.num_classes}",
        f"hidden = {','.join(str(h) for h in ref.hidden)}",
        f"has_selector = {int(selector is not None)}",
    ]
    if selector is not None:
        lines += [f"selector_hidden = {selector.hidden_dim}", f"cell_variant = {selector.cell_variant}"]
    if seed is not None:
        lines.append(f"seed = {seed}")
    if stage is not None:
        lines.append(f"stage = {stage}")
    for key, value in sorted((hyperparameters or {}).items()):
        lines.append(f"hp.{key} = {value}")
    payload = bytearray()
    for name, arr in arrays:
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        shape = "x".join(str(s) for s in arr.shape)
        lines.append(f"array {name} {shape} {len(payload)} {len(blob)}")
        payload += blob
    (path / "payload.bin").write_bytes(bytes(payload))
    (path / "manifest.txt").write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path: str | Path) -> tuple[dict[str, str], list[tuple[str, tuple[int, ...], int, int]]]:
    fields: dict[str, str] = {}
    arrays = []
    for lineno, line in enumerate((Path(path) / "manifest.txt").read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        if line.startswith("array "):
            parts = line.split()
            if len(parts) != 5:
                raise CheckpointError(f"manifest line {lineno}: malformed array entry")
            shape = tuple(int(s) for s in parts[2].split("x")) if parts[2] else ()
            arrays.append((parts[1], shape, int(parts[3]), int(parts[4])))
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"manifest line {lineno}: expected 'key = value'")
        fields[key.strip()] = value.strip()
    return fields, arrays


def load_checkpoint(path: str | Path) -> tuple[list[BaseModel], Selector | None, dict[str, str]]:
    path = Path(path)
    if not (path / "manifest.txt").exists():
        raise CheckpointError(f"{path}: no manifest.txt")
    try:
        fields, arrays = read_manifest(path)
        version = int(fields.get("format_version", -1))
    except ValueError as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})") from None
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    payload = (path / fields.get("payload", "payload.bin")).read_bytes()
    end = 0
    tensors: dict[str, np.ndarray] = {}
    for name, shape, offset, nbytes in arrays:
        if offset + nbytes > len(payload):
            raise CheckpointError(f"{path}: array {name} [{offset}, {offset + nbytes}) exceeds payload of {len(payload)} bytes")
        if nbytes != 4 * int(np.prod(shape)):
            raise CheckpointError(f"{path}: array {name} byte length {nbytes} does not match shape {shape}")
        if name in tensors:
            raise CheckpointError(f"{path}: array {name} listed twice")
        tensors[name] = np.frombuffer(payload[offset : offset + nbytes], dtype="<f4").reshape(shape).astype(np.float64)
        end = max(end, offset + nbytes)
    if end != len(payload):
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, manifest accounts for {end}")
    try:
        models, selector = _build(fields, tensors)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: manifest does not describe the stored arrays ({exc})") from None
    leftover = [k for k in tensors if not k.startswith(("model.", "selector."))]
    if leftover:
        raise CheckpointError(f"{path}: unexpected arrays {leftover}")
    return models, selector, fields


def _build(fields: dict[str, str], tensors: dict[str, np.ndarray]) -> tuple[list[BaseModel], Selector | None]:
    n_models = int(fields["num_models"])
    input_dim = int(fields["input_dim"])
    num_classes = int(fields["num_classes"])
    hidden = tuple(int(h) for h in fields["hidden"].split(",") if h)
    models = []
    for i in range(n_models):
        m = BaseModel(input_dim, num_classes, hidden, rng=np.random.default_rng(0))
        prefix = f"model.{i}."
        m.load_state_dict({k[len(prefix) :]: v for k, v in tensors.items() if k.startswith(prefix)})
        models.append(m)
    selector = None
    if fields.get("has_selector") == "1":
        variant = fields.get("cell_variant", CELL_VARIANT)
        if variant != CELL_VARIANT:
            raise CheckpointError(f"unsupported cell variant {variant!r}")
        selector = Selector(2 * num_classes + 1, int(fields["selector_hidden"]), rng=np.random.default_rng(0))
        selector.load_state_dict({k[len("selector.") :]: v for k, v in tensors.items() if k.startswith("selector.")})
    return models, selector


def with_splits(dataset: Dataset, sizes: Sequence[int] | None, seed: int) -> Dataset:
    """Re-tag samples into train/val/test with a seeded shuffle (for files that carry no split)."""
    n = len(dataset.labels)
    sizes = tuple(sizes) if sizes is not None else _default_sizes(n)
    try:
        split = _assign_splits(n, sizes, substream(seed, "split"))
    except ValueError as exc:
        raise DataFormatError(str(exc)) from None
    return Dataset(dataset.features, dataset.labels, split, dataset.num_classes, dataset.provenance, dataset.tiers, dict(dataset.meta))
