"""Reading and writing images, intensity normalization, paired datasets.

Two on-disk formats are understood: binary PGM (``P5``, 8 or 16 bit) for 2D
images and the native ``DOTE`` tensor container for 2D/3D grids.  A dataset
manifest is a text file of ``id<TAB>source_path<TAB>target_path`` lines;
relative paths resolve against the manifest's directory.
"""

import os
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, FormatError, InvalidInputError
from .grid import read_tensor, write_tensor
from .synthesis import PairedDataset

__all__ = [
    "ImageRecord",
    "guess_format",
    "read_pgm",
    "write_pgm",
    "load_image",
    "save_image",
    "build_paired_dataset",
    "read_manifest",
    "load_dataset",
]

FORMATS = ("pgm", "dote_tensor")


@dataclass(frozen=True)
class ImageRecord:
    """A loaded image with the affine map back to raw intensities.

    ``raw = offset + scale * tensor``.  ``constant`` flags an image with zero
    dynamic range, which is mapped to all zeros.
    """

    id: str
    modality: str
    tensor: np.ndarray
    source_path: str
    format: str = "dote_tensor"
    offset: float = 0.0
    scale: float = 1.0
    constant: bool = False
    maxval: int = None

    def raw(self):
        return self.offset + self.scale * self.tensor


def guess_format(path):
    ext = os.path.splitext(str(path))[1].lower()
    return "pgm" if ext in (".pgm", ".pnm") else "dote_tensor"


def _pgm_tokens(buf, count):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens = []
    pos = 0
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    if pos >= n or not buf[pos : pos + 1].isspace():
        raise FormatError("PGM header is not followed by whitespace")
    return tokens, pos + 1


def read_pgm(path):
    """Parse a binary PGM.

    Returns
    -------
    values : ndarray of float64, shape (height, width)
        Raw sample values.
    maxval : int
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {buf[:2]!r})")
    (width, height, maxval), pos = _pgm_tokens(buf[2:], 3)
    try:
        width, height, maxval = int(width), int(height), int(maxval)
    except ValueError:
        raise FormatError(f"{path}: non-numeric PGM header") from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise FormatError(f"{path}: invalid PGM header {width}x{height} maxval {maxval}")
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    need = width * height * dtype.itemsize
    data = buf[2 + pos :]
    if len(data) < need:
        raise FormatError(f"{path}: truncated PGM payload ({len(data)} of {need} bytes)")
    values = np.frombuffer(data, dtype=dtype, count=width * height).reshape(height, width)
    if values.max() > maxval:
        raise FormatError(f"{path}: sample exceeds maxval {maxval}")
    return values.astype(np.float64), maxval


def write_pgm(path, t, maxval=255):
    """Write a [0, 1] image as binary PGM, rounding to ``maxval`` levels."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 2:
        raise DimensionError(f"PGM holds 2D images only, got shape {t.shape}")
    if not 0 < maxval < 65536:
        raise InvalidInputError(f"maxval must be in 1..65535, got {maxval}")
    q = np.rint(np.clip(t, 0.0, 1.0) * maxval)
    dtype = ">u1" if maxval < 256 else ">u2"
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n%d\n" % (t.shape[1], t.shape[0], maxval))
        fh.write(q.astype(dtype).tobytes())


def load_image(path, format=None, normalize=True, id=None, modality=""):
    """Load an image or volume, min-max normalized to [0, 1].

    With ``normalize=False`` the raw values are returned unchanged.
    """
    fmt = format or guess_format(path)
    if fmt not in FORMATS:
        raise InvalidInputError(f"unknown image format {fmt!r}")
    maxval = None
    if fmt == "pgm":
        raw, maxval = read_pgm(path)
    else:
        raw = read_tensor(path)
        if raw.ndim not in (2, 3):
            raise FormatError(f"{path}: expected a rank 2 or 3 tensor, got shape {raw.shape}")
    if not np.all(np.isfinite(raw)):
        raise FormatError(f"{path}: non-finite samples")
    ident = id if id is not None else os.path.splitext(os.path.basename(str(path)))[0]
    if not normalize:
        return ImageRecord(ident, modality, raw, str(path), fmt, maxval=maxval)
    lo, hi = float(raw.min()), float(raw.max())
    if hi == lo:
        return ImageRecord(ident, modality, np.zeros_like(raw), str(path), fmt, lo, 1.0, True, maxval)
    return ImageRecord(ident, modality, (raw - lo) / (hi - lo), str(path), fmt, lo, hi - lo, False, maxval)


def save_image(path, t, format=None, maxval=255):
    fmt = format or guess_format(path)
    if fmt == "pgm":
        write_pgm(path, t, maxval)
    elif fmt == "dote_tensor":
        write_tensor(path, t)
    else:
        raise InvalidInputError(f"unknown image format {fmt!r}")


def build_paired_dataset(sources, targets):
    """Pair source and target records by id, in source order."""
    if len(sources) != len(targets):
        raise InvalidInputError(f"{len(sources)} sources but {len(targets)} targets")
    by_id = {}
    for rec in targets:
        if rec.id in by_id:
            raise InvalidInputError(f"duplicate target id {rec.id!r}")
        by_id[rec.id] = rec
    pairs, ids = [], []
    for src in sources:
        tgt = by_id.get(src.id)
        if tgt is None:
            raise InvalidInputError(f"no target with id {src.id!r}")
        if src.tensor.shape != tgt.tensor.shape:
            raise DimensionError(f"pair {src.id!r}: source {src.tensor.shape} vs target {tgt.tensor.shape}")
        pairs.append((src.tensor, tgt.tensor))
        ids.append(src.id)
    src_mod = sources[0].modality if sources else "source"
    tgt_mod = targets[0].modality if targets else "target"
    return PairedDataset(pairs, src_mod or "source", tgt_mod or "target", ids)


def read_manifest(path):
    """Parse manifest lines into ``(id, source_path, target_path)`` triples."""
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 tab-separated columns, got {len(cols)}")
            ident, src, tgt = cols
            entries.append((ident, os.path.join(base, src), os.path.join(base, tgt)))
    return entries


def load_dataset(manifest_path):
    entries = read_manifest(manifest_path)
    sources = [load_image(s, id=i, modality="source") for i, s, _ in entries]
    targets = [load_image(t, id=i, modality="target") for i, _, t in entries]
    return build_paired_dataset(sources, targets)
