"""Linear channel mapping between the two feature-map spaces."""

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InvalidInputError

__all__ = ["ChannelMap", "apply_channels", "update_mapping"]


def apply_channels(M, S):
    """Mix the channel axis of a ``(K, ...)`` stack by the matrix ``M`` at every voxel."""
    S = np.asarray(S)
    return np.tensordot(M, S, axes=(1, 0))


@dataclass(frozen=True)
class ChannelMap:
    """A ``K x K`` matrix acting voxelwise on stacked feature maps.

    ``ridge`` is the Tikhonov term used by :meth:`inverse`; when not given it
    defaults to ``1e-8 * trace(W^T W) / K``.
    """

    matrix: np.ndarray
    ridge: float = None
    _inv: list = field(default_factory=list, init=False, repr=False, compare=False)

    def __post_init__(self):
        W = np.array(self.matrix, dtype=np.float64)
        if W.ndim != 2 or W.shape[0] != W.shape[1]:
            raise DimensionError(f"channel map must be square, got {W.shape}")
        if not np.all(np.isfinite(W)):
            raise InvalidInputError("channel map has non-finite entries")
        W.setflags(write=False)
        object.__setattr__(self, "matrix", W)
        if self.ridge is None:
            object.__setattr__(self, "ridge", 1e-8 * float(np.sum(W * W)) / W.shape[0])
        elif not self.ridge >= 0:
            raise InvalidInputError(f"ridge must be >= 0, got {self.ridge}")

    @classmethod
    def identity(cls, K):
        return cls(np.eye(K))

    @property
    def K(self):
        return self.matrix.shape[0]

    def inverse(self):
        """Regularized inverse ``(W^T W + ridge*I)^-1 W^T`` (cached)."""
        if not self._inv:
            W = self.matrix
            if self.ridge == 0 and not np.any(W):
                inv = np.zeros_like(W)
            else:
                inv = np.linalg.solve(W.T @ W + self.ridge * np.eye(self.K), W.T)
            inv.setflags(write=False)
            self._inv.append(inv)
        return self._inv[0]

    def forward(self, S):
        return apply_channels(self.matrix, S)

    def backward(self, S):
        return apply_channels(self.inverse(), S)


def _flatten(stacks):
    """Concatenate per-pair ``(K, ...)`` stacks into one ``K x N`` matrix."""
    if isinstance(stacks, np.ndarray):
        stacks = [stacks]
    stacks = [np.asarray(s, dtype=np.float64) for s in stacks]
    K = stacks[0].shape[0]
    if any(s.shape[0] != K for s in stacks):
        raise DimensionError("feature-map stacks disagree on channel count")
    return np.concatenate([s.reshape(K, -1) for s in stacks], axis=1)


def update_mapping(Sx, Sy, beta, gamma):
    """Closed-form ridge fit of ``Sy ~ W Sx`` across channels.

    Solves ``min_W ||Sy - W Sx||_F^2 + (gamma/beta) ||W||_F^2`` with
    ``W = Sy Sx^T (Sx Sx^T + (gamma/beta) I)^-1``.

    Parameters
    ----------
    Sx, Sy : ndarray or list of ndarray
        Source and target feature maps, each a ``(K, ...)`` stack or a list of
        stacks (one per training pair); voxels of all pairs are pooled.
    beta : float
        Coupling weight, must be positive.
    gamma : float
        Ridge weight.

    Returns
    -------
    ChannelMap
    """
    if not beta > 0:
        raise InvalidInputError("update_mapping needs beta > 0; the mapping is undefined without coupling")
    if gamma < 0:
        raise InvalidInputError(f"gamma must be >= 0, got {gamma}")
    A = _flatten(Sx)
    B = _flatten(Sy)
    if A.shape != B.shape:
        raise DimensionError(f"source maps {A.shape} and target maps {B.shape} differ")
    K = A.shape[0]
    gram = A @ A.T + (gamma / beta) * np.eye(K)
    # W gram = B A^T, gram symmetric
    W = np.linalg.solve(gram, A @ B.T).T
    return ChannelMap(W)
