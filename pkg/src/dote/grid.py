"""Dense grids, discrete Fourier transforms and circular convolution.

Images, volumes and feature maps are plain ``numpy`` float64 arrays of
rank 2 or 3.  Spectra are complex128 arrays of the same shape.  The
forward transform is unnormalized and the inverse carries the ``1/N``
factor, so ``sum(|fft_forward(t)|**2) == t.size * sum(t**2)``.
"""

import struct

import numpy as np

from .errors import DimensionError, FormatError, InvalidInputError, NumericalConsistencyError

__all__ = [
    "as_tensor",
    "fft_forward",
    "fft_inverse",
    "circular_convolve",
    "embed_kernel",
    "crop_kernel",
    "tensor_to_bytes",
    "tensor_from_bytes",
    "write_tensor",
    "read_tensor",
]

MAGIC = b"DOTE"
FORMAT_VERSION = 1

# relative imaginary residue tolerated when an inverse transform is claimed real
IMAG_TOL = 1e-9


def as_tensor(t, ranks=(2, 3), name="tensor"):
    """Validate ``t`` and return it as a float64 array."""
    arr = np.asarray(t, dtype=np.float64)
    if arr.ndim not in ranks:
        raise DimensionError(f"{name} must have rank in {ranks}, got shape {arr.shape}")
    if arr.size == 0:
        raise DimensionError(f"{name} has an empty extent: {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def fft_forward(t):
    """Unnormalized n-dimensional DFT of a real grid.

    Parameters
    ----------
    t : array_like
        Real array of rank 2 or 3.

    Returns
    -------
    ndarray
        Complex spectrum with the same shape as ``t``.
    """
    return np.fft.fftn(as_tensor(t))


def fft_inverse(s):
    """Inverse DFT (with ``1/N`` normalization) of a spectrum claimed to be real.

    Imaginary residue up to ``IMAG_TOL`` relative to the output magnitude is
    dropped. Anything larger means the spectrum was not Hermitian and
    raises :class:`NumericalConsistencyError`.
    """
    spec = np.asarray(s, dtype=np.complex128)
    if spec.ndim not in (2, 3):
        raise DimensionError(f"spectrum must have rank 2 or 3, got shape {spec.shape}")
    if not np.all(np.isfinite(spec)):
        raise InvalidInputError("spectrum contains non-finite values")
    out = np.fft.ifftn(spec)
    scale = max(np.max(np.abs(out.real)), np.finfo(np.float64).tiny)
    residue = np.max(np.abs(out.imag))
    if residue > IMAG_TOL * max(scale, 1.0):
        raise NumericalConsistencyError(
            f"inverse transform has imaginary residue {residue:.3e}; spectrum is not Hermitian"
        )
    return np.ascontiguousarray(out.real)


def embed_kernel(kernel, target_dims):
    """Place ``kernel`` at the origin corner of a zero grid of ``target_dims``."""
    k = np.asarray(kernel, dtype=np.float64)
    target_dims = tuple(int(n) for n in target_dims)
    if k.ndim != len(target_dims):
        raise DimensionError(f"kernel rank {k.ndim} does not match target rank {len(target_dims)}")
    if any(a > b for a, b in zip(k.shape, target_dims)):
        raise DimensionError(f"kernel {k.shape} is larger than target {target_dims}")
    out = np.zeros(target_dims)
    out[tuple(slice(0, n) for n in k.shape)] = k
    return out


def crop_kernel(t, support):
    """Extract the origin corner of extent ``support`` (inverse of :func:`embed_kernel`).

    ``support`` is either an int (same extent on every axis) or a tuple.
    Only the trailing ``len(support)`` axes are cropped, so stacks of
    kernels with a leading channel axis are handled as well.
    """
    arr = np.asarray(t)
    if np.isscalar(support):
        support = (int(support),) * arr.ndim
    support = tuple(support)
    lead = arr.ndim - len(support)
    if lead < 0 or any(s > n for s, n in zip(support, arr.shape[lead:])):
        raise DimensionError(f"cannot crop {support} from {arr.shape}")
    return arr[(Ellipsis,) + tuple(slice(0, s) for s in support)].copy()


def circular_convolve(t, kernel):
    """Periodic-boundary convolution of ``t`` with a (smaller) kernel.

    The kernel is zero-embedded into the grid of ``t`` and the product is
    taken in the frequency domain.  The result has the shape of ``t``.
    """
    t = as_tensor(t)
    k = as_tensor(kernel, ranks=(t.ndim,), name="kernel")
    kk = embed_kernel(k, t.shape)
    axes = tuple(range(t.ndim))
    prod = np.fft.rfftn(t, axes=axes) * np.fft.rfftn(kk, axes=axes)
    return np.fft.irfftn(prod, s=t.shape, axes=axes)


def rfft_grid(a, ndim):
    """Half-spectrum transform over the last ``ndim`` axes."""
    return np.fft.rfftn(a, axes=tuple(range(-ndim, 0)))


def irfft_grid(a, shape):
    """Inverse of :func:`rfft_grid` onto a real grid of ``shape``."""
    return np.fft.irfftn(a, s=shape, axes=tuple(range(-len(shape), 0)))


# --- container format -------------------------------------------------------

_HEAD = struct.Struct("<4sHB")


def tensor_to_bytes(t):
    """Serialize an array to the ``DOTE`` tensor container."""
    arr = np.ascontiguousarray(t, dtype="<f8")
    if arr.ndim > 255:
        raise DimensionError("rank does not fit the container header")
    head = _HEAD.pack(MAGIC, FORMAT_VERSION, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + dims + arr.tobytes(order="C")


def tensor_from_bytes(buf, offset=0):
    """Parse one tensor container from ``buf`` at ``offset``.

    Returns
    -------
    arr : ndarray
    end : int
        Offset just past the parsed payload.
    """
    if len(buf) - offset < _HEAD.size:
        raise FormatError("truncated tensor header")
    magic, version, rank = _HEAD.unpack_from(buf, offset)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported tensor format version {version}")
    pos = offset + _HEAD.size
    if len(buf) - pos < 8 * rank:
        raise FormatError("truncated tensor extents")
    dims = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    nbytes = 8 * count
    if len(buf) - pos < nbytes:
        raise FormatError(f"truncated payload: need {nbytes} bytes, have {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims)
    return arr.astype(np.float64), pos + nbytes


def write_tensor(path, t):
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def read_tensor(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after tensor payload")
    return arr
