"""Applying a trained model, and the bicubic degradation used to build SR pairs."""

from dataclasses import dataclass, field

import numpy as np

from .csc_solver import infer_feature_maps, reconstruct
from .errors import DimensionError, InvalidInputError
from .grid import as_tensor

__all__ = ["PairedDataset", "synthesize", "sr_degrade", "sr_upsample", "keys_kernel", "sr_pairs"]

# tolerated excursion outside [0, 1] for "normalized" input
RANGE_SLACK = 0.01


@dataclass
class PairedDataset:
    """Registered ``(source, target)`` pairs on a common grid, intensities in [0, 1]."""

    pairs: list
    source_modality: str = "source"
    target_modality: str = "target"
    ids: list = field(default_factory=list)

    def __post_init__(self):
        pairs = []
        for i, (x, y) in enumerate(self.pairs):
            x = as_tensor(x, name="source")
            y = as_tensor(y, name="target")
            name = self.ids[i] if i < len(self.ids) else str(i)
            if x.shape != y.shape:
                raise DimensionError(f"pair {name}: source {x.shape} and target {y.shape} are not registered")
            for t in (x, y):
                if t.min() < -RANGE_SLACK or t.max() > 1 + RANGE_SLACK:
                    raise InvalidInputError(f"pair {name}: intensities are not normalized to [0, 1]")
            pairs.append((x, y))
        self.pairs = pairs

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def subset(self, indices):
        ids = [self.ids[i] for i in indices] if self.ids else []
        return PairedDataset([self.pairs[i] for i in indices], self.source_modality, self.target_modality, ids)


def synthesize(model, x_test, cfg=None, clamp=True):
    """Predict the target-domain image of ``x_test``.

    Source maps are inferred over ``model.Fx``, transported channel-wise by
    ``W`` and convolved with ``model.Fy``.  The result is clamped to
    [0, 1] unless ``clamp`` is false.
    """
    cfg = cfg or model.config
    x = as_tensor(x_test)
    if x.ndim != model.Fx.rank:
        raise DimensionError(f"rank-{x.ndim} input for a rank-{model.Fx.rank} model")
    if any(n < model.Fx.d for n in x.shape):
        raise DimensionError(f"input {x.shape} is smaller than the filter support {model.Fx.d}")
    if x.min() < -RANGE_SLACK or x.max() > 1 + RANGE_SLACK:
        raise InvalidInputError("input intensities must be normalized to [0, 1]")
    S, _ = infer_feature_maps(x, model.Fx, cfg.lam, cfg)
    y = reconstruct(model.Fy, model.W.forward(S))
    return np.clip(y, 0.0, 1.0) if clamp else y


def keys_kernel(t, a=-0.5):
    """Keys cubic convolution kernel."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def _reflect(j, n):
    # half-sample symmetric extension
    j = np.mod(j, 2 * n)
    return np.where(j >= n, 2 * n - 1 - j, j)


def _resample_matrix(n_in, n_out, scale):
    """Rows of bicubic weights mapping ``n_in`` samples to ``n_out``.

    ``scale = n_out / n_in``; for ``scale < 1`` the kernel is widened by
    ``1/scale`` (anti-aliasing).
    """
    width = 1.0 / scale if scale < 1 else 1.0
    M = np.zeros((n_out, n_in))
    for i in range(n_out):
        center = (i + 0.5) / scale - 0.5
        lo = int(np.floor(center - 2 * width))
        hi = int(np.ceil(center + 2 * width))
        js = np.arange(lo, hi + 1)
        w = keys_kernel((js - center) / width)
        w = w / w.sum()
        np.add.at(M[i], _reflect(js, n_in), w)
    return M


def _resample(t, factors):
    out = t
    for axis, n_out in enumerate(factors):
        M = _resample_matrix(out.shape[axis], n_out, n_out / out.shape[axis])
        out = np.moveaxis(np.tensordot(M, np.moveaxis(out, axis, 0), axes=(1, 0)), 0, axis)
    return out


def sr_degrade(hr, factor):
    """Anti-aliased bicubic downsampling by an integer ``factor`` on every axis."""
    hr = as_tensor(hr)
    factor = int(factor)
    if factor < 1:
        raise InvalidInputError(f"factor must be a positive integer, got {factor}")
    if any(n % factor for n in hr.shape):
        raise DimensionError(f"extents {hr.shape} are not divisible by {factor}")
    if factor == 1:
        return hr.copy()
    return _resample(hr, [n // factor for n in hr.shape])


def sr_upsample(lr, factor):
    """Bicubic interpolation onto a grid ``factor`` times finer on every axis."""
    lr = as_tensor(lr)
    factor = int(factor)
    if factor < 1:
        raise InvalidInputError(f"factor must be a positive integer, got {factor}")
    if factor == 1:
        return lr.copy()
    return _resample(lr, [n * factor for n in lr.shape])


def sr_pairs(images, factor=2):
    """``(upsampled LR, HR)`` registered pairs for super-resolution training."""
    pairs = []
    for hr in images:
        hr = as_tensor(hr)
        lr_up = np.clip(sr_upsample(sr_degrade(hr, factor), factor), 0.0, 1.0)
        pairs.append((lr_up, hr))
    return PairedDataset(pairs, "LR", "HR")
