"""Convolutional sparse coding subproblems solved by ADMM in the Fourier domain.

Feature maps live on the same grid as their image (periodic boundary), and a
stack of ``K`` maps is an array of shape ``(K, *image.shape)``.  Filters are
kept in a :class:`FilterBank` of shape ``(K, d, ..., d)``.

Two solvers are provided:

* feature-map inference, optionally with a quadratic coupling to the maps of
  the other domain (``min_S 1/2||x - sum_k f_k * s_k||^2 + lam ||S||_1 + coupling``),
  split as ``S = U`` with ``U`` carrying the l1 term;
* filter learning, one filter at a time, split as ``f = V`` with ``V``
  restricted to the small support and the unit ball.

Both linear steps are diagonal across frequencies: the map step is a dense
``K x K`` Hermitian solve per frequency bin, the filter step a scalar divide.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, FormatError, InvalidInputError
from .grid import as_tensor, crop_kernel, irfft_grid, rfft_grid, tensor_from_bytes, tensor_to_bytes
from .mapping import ChannelMap, apply_channels

__all__ = [
    "FilterBank",
    "AdmmState",
    "ConvergenceTrace",
    "soft_threshold",
    "project_unit_ball",
    "reconstruct",
    "csc_objective",
    "infer_feature_maps",
    "update_feature_maps_dual",
    "update_feature_maps_joint",
    "update_filters",
]

NORM_SLACK = 1e-9


def soft_threshold(v, t):
    """Elementwise ``sign(v) * max(|v| - t, 0)``; exactly zero at ``|v| == t``."""
    if np.any(np.asarray(t) < 0):
        raise InvalidInputError(f"threshold must be >= 0, got {t}")
    v = np.asarray(v, dtype=np.float64)
    out = np.sign(v) * np.maximum(np.abs(v) - t, 0.0)
    return out if out.ndim else float(out)


def project_unit_ball(f):
    """Radial projection onto ``{f : ||f||_2 <= 1}``."""
    f = np.asarray(f, dtype=np.float64)
    nrm = np.linalg.norm(f)
    if nrm <= 1.0:
        return f.copy()
    return f / nrm


@dataclass(frozen=True)
class FilterBank:
    """``K`` filters of support ``d`` per axis, each inside the unit l2 ball."""

    filters: np.ndarray

    def __post_init__(self):
        f = np.array(self.filters, dtype=np.float64)
        if f.ndim not in (3, 4):
            raise DimensionError(f"filter bank must have shape (K, d, d[, d]), got {f.shape}")
        if len(set(f.shape[1:])) != 1 or f.shape[1] % 2 == 0:
            raise DimensionError(f"filter support must be odd and equal on all axes, got {f.shape[1:]}")
        if not np.all(np.isfinite(f)):
            raise InvalidInputError("filter bank has non-finite entries")
        norms = np.sqrt(np.sum(f.reshape(f.shape[0], -1) ** 2, axis=1))
        if np.any(norms > 1.0 + NORM_SLACK):
            raise InvalidInputError(f"filter norms exceed 1: max {norms.max():.6g}")
        f.setflags(write=False)
        object.__setattr__(self, "filters", f)

    @property
    def K(self):
        return self.filters.shape[0]

    @property
    def d(self):
        return self.filters.shape[1]

    @property
    def rank(self):
        return self.filters.ndim - 1

    @classmethod
    def random(cls, K, d, rank=2, rng=None):
        """Standard normal draw, each filter projected onto the unit ball."""
        rng = np.random.default_rng(rng)
        raw = rng.standard_normal((K,) + (d,) * rank)
        return cls(np.stack([project_unit_ball(f) for f in raw]))

    @classmethod
    def zeros(cls, K, d, rank=2):
        return cls(np.zeros((K,) + (d,) * rank))

    def spectra(self, dims):
        """Half spectra of the filters zero-embedded on a grid of ``dims``."""
        dims = tuple(dims)
        if len(dims) != self.rank:
            raise DimensionError(f"rank-{self.rank} filters cannot act on grid {dims}")
        if any(self.d > n for n in dims):
            raise DimensionError(f"filter support {self.d} exceeds grid {dims}")
        return _embedded_spectra(self.filters, dims)

    _HEAD = struct.Struct("<4sQQB")

    def to_bytes(self):
        head = self._HEAD.pack(b"DFBK", self.K, self.d, self.rank)
        return head + tensor_to_bytes(self.filters)

    @classmethod
    def from_bytes(cls, buf, offset=0):
        if len(buf) - offset < cls._HEAD.size:
            raise FormatError("truncated filter-bank header")
        magic, K, d, rank = cls._HEAD.unpack_from(buf, offset)
        if magic != b"DFBK":
            raise FormatError(f"bad filter-bank magic {magic!r}")
        arr, end = tensor_from_bytes(buf, offset + cls._HEAD.size)
        if arr.shape != (K,) + (d,) * rank:
            raise FormatError(f"filter-bank header ({K}, {d}, {rank}) disagrees with payload {arr.shape}")
        return cls(arr), end


def _embedded_spectra(filters, dims):
    rank = len(dims)
    pad = [(0, 0)] + [(0, n - s) for s, n in zip(filters.shape[1:], dims)]
    return rfft_grid(np.pad(filters, pad), rank)


@dataclass
class AdmmState:
    """Splitting variables of a map solve: ``primary == auxiliary`` at a fixed point."""

    primary: np.ndarray
    auxiliary: np.ndarray
    scaled_duals: np.ndarray
    sigma: float
    primal_residual: float = 0.0
    dual_residual: float = 0.0


@dataclass
class ConvergenceTrace:
    """Per-iteration record of an ADMM solve."""

    objective: list = field(default_factory=list)
    primal_residual: list = field(default_factory=list)
    dual_residual: list = field(default_factory=list)
    converged: bool = False
    state: AdmmState = None

    @property
    def iterations(self):
        return len(self.objective)

    def to_csv(self):
        rows = ["iteration,objective,primal_residual,dual_residual"]
        for i, (o, p, d) in enumerate(zip(self.objective, self.primal_residual, self.dual_residual), 1):
            rows.append(f"{i},{o!r},{p!r},{d!r}")
        return "\n".join(rows) + "\n"


def _check_maps(S, dims, K):
    S = np.asarray(S, dtype=np.float64)
    if S.shape != (K,) + tuple(dims):
        raise DimensionError(f"feature maps have shape {S.shape}, expected {(K,) + tuple(dims)}")
    return S


def _check_bank(F, x):
    if not isinstance(F, FilterBank):
        F = FilterBank(F)
    if F.rank != x.ndim:
        raise DimensionError(f"rank-{F.rank} filters against rank-{x.ndim} image")
    if any(F.d > n for n in x.shape):
        raise DimensionError(f"filter support {F.d} exceeds image extents {x.shape}")
    return F


def reconstruct(F, S):
    """``sum_k F_k * S_k`` with circular convolution."""
    S = np.asarray(S, dtype=np.float64)
    dims = S.shape[1:]
    if not isinstance(F, FilterBank):
        F = FilterBank(F)
    Fh = F.spectra(dims)
    return irfft_grid(np.sum(Fh * rfft_grid(S, len(dims)), axis=0), dims)


def csc_objective(x, F, S, lam):
    """``1/2 ||x - sum_k F_k * S_k||^2 + lam * sum_k ||S_k||_1``."""
    x = as_tensor(x)
    F = _check_bank(F, x)
    S = _check_maps(S, x.shape, F.K)
    r = x - reconstruct(F, S)
    return 0.5 * float(np.sum(r * r)) + lam * float(np.sum(np.abs(S)))


# --- feature maps ------------------------------------------------------------


@dataclass
class _Coupling:
    """Voxelwise quadratic ``beta sum_j ||A_j Z - C_j||^2`` on the stacked maps ``Z``.

    ``C_j`` is a fixed map stack (or ``None`` for zero).  Contributes
    ``Q = 2 beta sum A^T A`` to the normal matrix and ``T = 2 beta sum A^T C``
    to the right-hand side.
    """

    blocks: list
    beta: float

    @property
    def Q(self):
        return 2.0 * self.beta * sum(A.T @ A for A, _ in self.blocks)

    @property
    def T(self):
        parts = [apply_channels(A.T, C) for A, C in self.blocks if C is not None]
        return 2.0 * self.beta * sum(parts) if parts else None

    def value(self, Z):
        total = 0.0
        for A, C in self.blocks:
            r = apply_channels(A, Z)
            if C is not None:
                r = r - C
            total += float(np.sum(r * r))
        return self.beta * total


def _map_system(spectra, Q, sigma):
    """Inverse of ``blockdiag(conj(a_i) a_i^T) + Q + sigma I`` at every frequency.

    ``spectra`` holds one ``(K_i, *freq)`` filter spectrum per stacked domain;
    the result has shape ``(nf, sum K_i, sum K_i)``.
    """
    n = sum(Fh.shape[0] for Fh in spectra)
    nf = spectra[0][0].size
    M = np.zeros((nf, n, n), dtype=np.complex128)
    lo = 0
    for Fh in spectra:
        K = Fh.shape[0]
        a = Fh.reshape(K, -1).T  # (nf, K)
        M[:, lo : lo + K, lo : lo + K] = np.conj(a)[:, :, None] * a[:, None, :]
        lo += K
    M = M + (Q + sigma * np.eye(n))[None]
    return np.linalg.inv(M)


def _apply_system(Minv, rhs):
    K = rhs.shape[0]
    shape = rhs.shape
    r = rhs.reshape(K, -1).T[:, :, None]
    return (Minv @ r)[:, :, 0].T.reshape(shape)


def _solve_maps(domains, lam, cfg, coupling=None, init=None):
    """ADMM over the maps of one or more ``(image, bank)`` domains stacked along channels."""
    sigma = cfg.sigma
    dims = domains[0][0].shape
    nd = len(dims)
    sizes = [F.K for _, F in domains]
    K = sum(sizes)
    splits = np.cumsum(sizes)[:-1]
    spectra = [F.spectra(dims) for _, F in domains]
    Q = coupling.Q if coupling is not None else np.zeros((K, K))
    Minv = _map_system(spectra, Q, sigma)
    b = np.concatenate([np.conj(Fh) * rfft_grid(x, nd)[None] for (x, _), Fh in zip(domains, spectra)])
    if coupling is not None and coupling.T is not None:
        b = b + rfft_grid(coupling.T, nd)

    def objective(Z):
        val = sum(csc_objective(x, F, S, lam) for (x, F), S in zip(domains, np.split(Z, splits)))
        return val + coupling.value(Z) if coupling is not None else val

    if init is None:
        U = np.zeros((K,) + dims)
    else:
        U = _check_maps(init, dims, K).copy()
    Dual = np.zeros_like(U)
    S = U.copy()
    trace = ConvergenceTrace()
    # a warm start competes with the iterates; a cold start does not
    best, best_obj = U, (objective(U) if init is not None else np.inf)
    thresh = lam / sigma
    for _ in range(cfg.max_inner):
        S = irfft_grid(_apply_system(Minv, b + sigma * rfft_grid(U - Dual, nd)), dims)
        U_old = U
        U = soft_threshold(S + Dual, thresh)
        Dual = Dual + S - U
        r = np.linalg.norm(S - U) / max(np.linalg.norm(S), 1.0)
        s = sigma * np.linalg.norm(U - U_old) / max(sigma * np.linalg.norm(Dual), 1.0)
        obj = objective(U)
        trace.objective.append(obj)
        trace.primal_residual.append(float(r))
        trace.dual_residual.append(float(s))
        if obj <= best_obj:
            best, best_obj = U, obj
        if max(r, s) < cfg.tol:
            trace.converged = True
            break
    trace.state = AdmmState(S, U, Dual, sigma, trace.primal_residual[-1], trace.dual_residual[-1])
    return best, trace


def infer_feature_maps(x, F, lam, cfg, init=None):
    """Sparse feature maps of ``x`` over fixed filters ``F``.

    Parameters
    ----------
    x : ndarray
        Image or volume.
    F : FilterBank
    lam : float
        l1 weight, ``>= 0``.
    cfg : SolverConfig
        Supplies ``sigma``, ``max_inner`` and ``tol``.
    init : ndarray, optional
        Warm start for the maps; the returned maps never score worse than it.

    Returns
    -------
    S : ndarray, shape ``(K, *x.shape)``
        The sparse (thresholded) iterate. When the solve did not converge
        this is the best iterate seen and ``trace.converged`` is ``False``.
    trace : ConvergenceTrace
    """
    if lam < 0:
        raise InvalidInputError(f"lam must be >= 0, got {lam}")
    x = as_tensor(x)
    F = _check_bank(F, x)
    return _solve_maps([(x, F)], lam, cfg, init=init)


def _check_terms(terms):
    terms = tuple(terms)
    for term in terms:
        if term not in ("primal", "dual"):
            raise InvalidInputError(f"unknown coupling term {term!r}")
    return terms


def _coupling_blocks(direction, terms, W, S_other):
    eye = np.eye(W.K)
    blocks = []
    for term in terms:
        if term == "primal":  # ||Sy - W Sx||^2
            if direction == "primal":
                blocks.append((W.matrix, S_other))
            else:
                blocks.append((eye, W.forward(S_other)))
        else:  # ||Sx - W^-1 Sy||^2
            if direction == "primal":
                blocks.append((eye, W.backward(S_other)))
            else:
                blocks.append((W.inverse(), S_other))
    return blocks


def _as_channel_map(W, K):
    if not isinstance(W, ChannelMap):
        W = ChannelMap(W)
    if W.K != K:
        raise DimensionError(f"channel map is {W.K}x{W.K} but bank has {K} filters")
    return W


def update_feature_maps_dual(x, F, S_other, W, direction, lam, beta, cfg, terms=None, init=None):
    """Feature maps of one domain coupled to the fixed maps of the other.

    ``direction="primal"`` solves for the source maps ``Sx`` (``S_other`` is
    ``Sy``); ``direction="dual"`` solves for ``Sy`` (``S_other`` is ``Sx``).
    The coupling terms are

    * ``"primal"``: ``beta ||Sy - W Sx||^2``
    * ``"dual"``:   ``beta ||Sx - W^-1 Sy||^2`` with the regularized inverse

    and ``terms`` picks which of them enter the solve.  The default is the
    single term named by ``direction``.
    """
    if direction not in ("primal", "dual"):
        raise InvalidInputError(f"direction must be 'primal' or 'dual', got {direction!r}")
    if lam < 0 or beta < 0:
        raise InvalidInputError("lam and beta must be >= 0")
    x = as_tensor(x)
    F = _check_bank(F, x)
    S_other = _check_maps(S_other, x.shape, F.K)
    W = _as_channel_map(W, F.K)
    terms = _check_terms((direction,) if terms is None else terms)
    coupling = None
    if beta > 0 and terms:
        coupling = _Coupling(_coupling_blocks(direction, terms, W, S_other), beta)
    return _solve_maps([(x, F)], lam, cfg, coupling=coupling, init=init)


def update_feature_maps_joint(x, y, Fx, Fy, W, lam, beta, cfg, terms=("primal",), init=None):
    """Source and target maps of one pair solved together.

    Minimizes ``csc(x; Fx, Sx) + csc(y; Fy, Sy)`` plus the selected coupling
    terms (see :func:`update_feature_maps_dual`) over ``(Sx, Sy)`` at once,
    with a ``2K x 2K`` solve per frequency.  This is the exact minimizer of
    the maps block of the joint objective for fixed filters and ``W``.

    Returns
    -------
    Sx, Sy : ndarray
    trace : ConvergenceTrace
        Over the stacked ``(2K, ...)`` maps.
    """
    if lam < 0 or beta < 0:
        raise InvalidInputError("lam and beta must be >= 0")
    x = as_tensor(x, name="source")
    y = as_tensor(y, name="target")
    if x.shape != y.shape:
        raise DimensionError(f"source {x.shape} and target {y.shape} are not registered")
    Fx = _check_bank(Fx, x)
    Fy = _check_bank(Fy, y)
    if Fx.K != Fy.K:
        raise DimensionError(f"banks have {Fx.K} and {Fy.K} filters")
    K = Fx.K
    W = _as_channel_map(W, K)
    terms = _check_terms(terms)
    coupling = None
    if beta > 0 and terms:
        eye = np.eye(K)
        blocks = []
        if "primal" in terms:
            blocks.append((np.hstack([-W.matrix, eye]), None))
        if "dual" in terms:
            blocks.append((np.hstack([eye, -W.inverse()]), None))
        coupling = _Coupling(blocks, beta)
    if init is not None:
        init = np.concatenate([_check_maps(init[0], x.shape, K), _check_maps(init[1], y.shape, K)])
    Z, trace = _solve_maps([(x, Fx), (y, Fy)], lam, cfg, coupling=coupling, init=init)
    return Z[:K], Z[K:], trace


# --- filters -----------------------------------------------------------------


def _filter_objective(R, Sk_h, f, dims):
    """``sum_i 1/2 ||R_i - f * S_ik||^2`` for a candidate support-sized filter."""
    fh = _embedded_spectra(f[None], dims)[0]
    total = 0.0
    for Ri, Sh in zip(R, Sk_h):
        e = Ri - irfft_grid(fh * Sh, dims)
        total += 0.5 * float(np.sum(e * e))
    return total


def update_filters(pairs, d, cfg, init=None, sweeps=1):
    """Learn a filter bank for fixed feature maps, one filter at a time.

    Approximately minimizes ``sum_i 1/2 ||X_i - sum_k F_k * S_ik||^2`` over
    filters supported on ``d^D`` with ``||F_k||_2 <= 1``.  Each filter is
    solved by ADMM with the others held fixed.  A filter whose maps are zero
    in every pair has no data term and is left where it started.

    Parameters
    ----------
    pairs : list of (ndarray, ndarray)
        ``(image, maps)`` with maps of shape ``(K, *image.shape)``.
    d : int
        Odd filter support.
    cfg : SolverConfig
    init : FilterBank, optional
        Warm start. Without it the filters start at zero. With it, each
        filter update is kept only if it does not increase the objective.
    sweeps : int
        Passes over ``k``.

    Returns
    -------
    FilterBank
    """
    if not pairs:
        raise InvalidInputError("update_filters needs at least one (image, maps) pair")
    images = [as_tensor(X) for X, _ in pairs]
    dims = images[0].shape
    nd = len(dims)
    if any(X.shape != dims for X in images):
        raise DimensionError("all images must share the same extents")
    K = np.asarray(pairs[0][1]).shape[0]
    maps = [_check_maps(S, dims, K) for _, S in pairs]
    if d < 1 or d % 2 == 0 or any(d > n for n in dims):
        raise DimensionError(f"support {d} is not odd or exceeds {dims}")
    if init is None:
        filters = np.zeros((K,) + (d,) * nd)
    else:
        if init.K != K or init.d != d or init.rank != nd:
            raise DimensionError("initial bank does not match maps or support")
        filters = np.array(init.filters)

    sigma = cfg.sigma
    Xh = [rfft_grid(X, nd) for X in images]
    Sh = [rfft_grid(S, nd) for S in maps]
    Fh = _embedded_spectra(filters, dims)
    crop = tuple(slice(0, d) for _ in range(nd))
    pad = [(0, n - d) for n in dims]

    for _ in range(sweeps):
        for k in range(K):
            if all(not np.any(S[k]) for S in maps):
                # no data term for this filter: keep the warm start, else stay at zero
                continue
            # residual spectra with filter k removed
            Rh = [X - np.sum(Fh * S, axis=0) + Fh[k] * S[k] for X, S in zip(Xh, Sh)]
            num = sum(np.conj(S[k]) * R for R, S in zip(Rh, Sh))
            den = sum(np.abs(S[k]) ** 2 for S in Sh) + sigma
            V = np.pad(filters[k], pad)
            Dv = np.zeros(dims)
            for _ in range(cfg.max_inner):
                f = irfft_grid((num + sigma * rfft_grid(V - Dv, nd)) / den, dims)
                V_old = V
                V = np.pad(project_unit_ball((f + Dv)[crop]), pad)
                Dv = Dv + f - V
                r = np.linalg.norm(f - V) / max(np.linalg.norm(f), 1.0)
                s = sigma * np.linalg.norm(V - V_old) / max(sigma * np.linalg.norm(Dv), 1.0)
                if max(r, s) < cfg.tol:
                    break
            candidate = crop_kernel(V, d)
            if init is not None:
                R = [irfft_grid(r_, dims) for r_ in Rh]
                Sk = [S[k] for S in Sh]
                if _filter_objective(R, Sk, candidate, dims) > _filter_objective(R, Sk, filters[k], dims):
                    continue
            filters[k] = candidate
            Fh[k] = _embedded_spectra(candidate[None], dims)[0]
    return FilterBank(filters)
