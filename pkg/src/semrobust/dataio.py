"""Dataset ingestion: IDX files, normalization, stratified subsampling,
checksum manifests, and PGM export.

All functions are pure; the returned arrays are freshly allocated and
safe to share across workers.
"""

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagic, ChecksumMismatch, NTooLarge, TruncatedFile

# IDX dtype codes. Payload bytes are big-endian, like the header.
_CODE_TO_DTYPE = {0x08: np.dtype(">u1"), 0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8")}
_KIND_TO_CODE = {"u": 0x08, "f": None}  # float code picked by itemsize

MAGIC_IMAGES = 0x00000803
MAGIC_LABELS = 0x00000801


def read_idx(path):
    """Decode any supported IDX file (ubyte / float32 / float64).

    Returns a native-endian numpy array with the shape given by the header.
    """
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise TruncatedFile(f"{path}: header shorter than 4 bytes")
    if data[0] != 0 or data[1] != 0 or data[2] not in _CODE_TO_DTYPE or data[3] == 0:
        raise BadMagic(f"{path}: unsupported magic {data[:4].hex()}")
    ndim = data[3]
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise TruncatedFile(f"{path}: dimension header cut short")
    shape = struct.unpack(">" + "I" * ndim, data[4:header_end])
    dtype = _CODE_TO_DTYPE[data[2]]
    count = int(np.prod(shape, dtype=np.int64))
    need = header_end + count * dtype.itemsize
    if len(data) < need:
        raise TruncatedFile(f"{path}: payload has {len(data) - header_end} bytes, "
                            f"header promises {count * dtype.itemsize}")
    arr = np.frombuffer(data[header_end:need], dtype=dtype).reshape(shape)
    return arr.astype(dtype.newbyteorder("="))


def write_idx(path, arr):
    """Encode a ubyte / float32 / float64 array as an IDX file."""
    arr = np.asarray(arr)
    if arr.dtype == np.uint8:
        code, out_dtype = 0x08, np.dtype(">u1")
    elif arr.dtype == np.float32:
        code, out_dtype = 0x0D, np.dtype(">f4")
    elif arr.dtype == np.float64:
        code, out_dtype = 0x0E, np.dtype(">f8")
    else:
        raise ValueError(f"unsupported dtype for IDX: {arr.dtype}")
    if arr.ndim < 1 or arr.ndim > 255:
        raise ValueError(f"unsupported ndim for IDX: {arr.ndim}")
    with open(path, "wb") as f:
        f.write(struct.pack("BBBB", 0, 0, code, arr.ndim))
        f.write(struct.pack(">" + "I" * arr.ndim, *arr.shape))
        f.write(np.ascontiguousarray(arr, dtype=out_dtype).tobytes())


def load_idx(path):
    """Read one half of a raw dataset: an image file (magic 0x00000803)
    or a label file (magic 0x00000801). Anything else raises BadMagic."""
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise TruncatedFile(f"{path}: header shorter than 4 bytes")
    magic = struct.unpack(">I", data[:4])[0]
    if magic not in (MAGIC_IMAGES, MAGIC_LABELS):
        raise BadMagic(f"{path}: magic {magic} is neither an image nor a label file")
    return read_idx(path)


@dataclass
class RawDataset:
    """Unsigned-byte images [N, 28, 28] and labels [N] in 0..9."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.images.shape[0]} images vs "
                             f"{self.labels.shape[0]} labels")
        if self.labels.size and int(self.labels.max()) > 9:
            raise ValueError("labels must be < 10")

    @property
    def n(self):
        return self.images.shape[0]


@dataclass
class Dataset:
    """Flattened real-valued images in [0, 1] with integer labels."""

    images: np.ndarray  # float32 [N, D]
    labels: np.ndarray  # int64 [N]
    split_tag: str

    @property
    def n(self):
        return self.images.shape[0]

    @property
    def side(self):
        return int(round(self.images.shape[1] ** 0.5))


def load_raw_dataset(images_path, labels_path):
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if images.ndim != 3:
        raise BadMagic(f"{images_path}: expected a 3-D image file")
    if labels.ndim != 1:
        raise BadMagic(f"{labels_path}: expected a 1-D label file")
    return RawDataset(images=images, labels=labels)


def save_raw_dataset(raw, images_path, labels_path):
    write_idx(images_path, raw.images.astype(np.uint8))
    write_idx(labels_path, raw.labels.astype(np.uint8))


def normalize(raw, split_tag="train"):
    """Map byte images to floats in [0, 1] (pixel = byte / 255) and
    flatten to one row per example."""
    n = raw.n
    images = raw.images.reshape(n, -1).astype(np.float32) / np.float32(255)
    labels = raw.labels.astype(np.int64)
    return Dataset(images=images, labels=labels, split_tag=split_tag)


def stratified_indices(labels, n, seed):
    """Indices of a label-stratified draw of n examples without replacement.

    Per-class counts follow largest-remainder apportionment, so each class
    keeps its proportion to within one example. Deterministic per seed;
    returned indices are sorted ascending.
    """
    labels = np.asarray(labels)
    if n > labels.shape[0]:
        raise NTooLarge(f"asked for {n} of {labels.shape[0]} examples")
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(labels, return_counts=True)
    quota = counts * (n / labels.shape[0])
    take = np.floor(quota).astype(int)
    remainder = n - int(take.sum())
    if remainder:
        order = np.argsort(-(quota - take), kind="stable")
        take[order[:remainder]] += 1
    picks = []
    for cls, t in zip(classes, take):
        pool = np.flatnonzero(labels == cls)
        picks.append(rng.choice(pool, size=t, replace=False))
    return np.sort(np.concatenate(picks))


def subsample(ds, n, seed):
    """Draw n examples without replacement, stratified by label. The same
    (dataset, n, seed) triple always selects the same subset."""
    idx = stratified_indices(ds.labels, n, seed)
    return Dataset(images=ds.images[idx].copy(),
                   labels=ds.labels[idx].copy(),
                   split_tag=ds.split_tag)


# --- checksum manifest ------------------------------------------------------

def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_checksum_manifest(directory, filenames, manifest_name="sha256sums.txt"):
    """Write 'hex-digest filename' lines, one per file."""
    directory = Path(directory)
    lines = [f"{sha256_file(directory / name)} {name}" for name in filenames]
    (directory / manifest_name).write_text("\n".join(lines) + "\n")


def verify_checksum_manifest(directory, manifest_name="sha256sums.txt"):
    """Recompute digests against the manifest. Returns {filename: digest}
    on success; raises ChecksumMismatch naming every offending file."""
    directory = Path(directory)
    manifest = directory / manifest_name
    if not manifest.exists():
        raise ChecksumMismatch(f"manifest {manifest} not found")
    recorded = {}
    for line in manifest.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        digest, name = line.split(maxsplit=1)
        recorded[name] = digest
    bad = []
    for name, digest in recorded.items():
        target = directory / name
        if not target.exists():
            bad.append(f"{name} (missing)")
        elif sha256_file(target) != digest:
            bad.append(name)
    if bad:
        raise ChecksumMismatch("checksum failures: " + ", ".join(bad))
    return recorded


# --- PGM export -------------------------------------------------------------

def write_pgm(path, image):
    """Write one grayscale image as binary PGM (maxval 255).

    Accepts a 2-D float array in [0, 1] or a 2-D uint8 array.
    """
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("write_pgm wants a 2-D image")
    if image.dtype != np.uint8:
        image = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())
