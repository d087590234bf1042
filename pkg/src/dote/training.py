"""Joint two-domain filter learning with a closed-loop channel mapping.

The trained quantities are a source bank ``Fx``, a target bank ``Fy`` and a
``K x K`` channel map ``W`` such that target feature maps are ``W`` applied to
source feature maps at every voxel.  Training alternates three blocks per
outer sweep: feature maps of both domains, both filter banks, then ``W``.

The joint objective summed over training pairs is::

    1/2 ||X - Fx * Sx||^2 + 1/2 ||Y - Fy * Sy||^2
      + lam (||Sx||_1 + ||Sy||_1)
      + beta ||Sy - W Sx||^2 + beta ||Sx - W^-1 Sy||^2
      + gamma ||W||_F^2

With ``dual_enabled=False`` the ``W^-1`` term is dropped entirely.

Every block update is exact or guarded, so the objective never increases
from one sweep to the next: the maps of a pair are solved jointly (source
and target together, with every coupling term), filters are updated from a
warm start and kept when an update would not help, and ``W`` moves toward
the ridge solution only as far as the objective allows.
"""

import logging
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .config import SolverConfig, format_config, parse_config
from .csc_solver import FilterBank, infer_feature_maps, reconstruct, update_feature_maps_joint, update_filters
from .errors import DimensionError, FormatError, InvalidInputError
from .grid import as_tensor, tensor_from_bytes, tensor_to_bytes
from .mapping import ChannelMap, apply_channels, update_mapping

__all__ = ["DoteModel", "TrainReport", "joint_objective", "train", "save_model", "load_model", "TERMS"]

log = logging.getLogger(__name__)

TERMS = ("data_x", "data_y", "l1_x", "l1_y", "coupling_primal", "coupling_dual", "mapping_ridge")

MODEL_MAGIC = b"DMDL"
MODEL_VERSION = 1


@dataclass(frozen=True)
class DoteModel:
    Fx: FilterBank
    Fy: FilterBank
    W: ChannelMap
    config: SolverConfig
    training_dims: tuple

    def __post_init__(self):
        if not (self.Fx.K == self.Fy.K == self.W.K):
            raise DimensionError(f"inconsistent channel counts: Fx {self.Fx.K}, Fy {self.Fy.K}, W {self.W.K}")
        if self.Fx.d != self.Fy.d or self.Fx.rank != self.Fy.rank:
            raise DimensionError("source and target banks differ in support or rank")
        object.__setattr__(self, "training_dims", tuple(int(n) for n in self.training_dims))

    @property
    def K(self):
        return self.W.K

    def to_bytes(self):
        cfg = format_config(self.config).encode("utf-8")
        dims = self.training_dims
        head = struct.pack("<4sHQQB", MODEL_MAGIC, MODEL_VERSION, self.K, self.Fx.d, self.Fx.rank)
        head += struct.pack(f"<B{len(dims)}Q", len(dims), *dims)
        head += struct.pack("<I", len(cfg)) + cfg
        return (
            head
            + self.Fx.to_bytes()
            + self.Fy.to_bytes()
            + tensor_to_bytes(self.W.matrix)
            + struct.pack("<d", self.W.ridge)
        )

    @classmethod
    def from_bytes(cls, buf):
        try:
            magic, version, K, d, rank = struct.unpack_from("<4sHQQB", buf, 0)
            if magic != MODEL_MAGIC:
                raise FormatError(f"bad model magic {magic!r}")
            if version != MODEL_VERSION:
                raise FormatError(f"unsupported model version {version}")
            pos = struct.calcsize("<4sHQQB")
            (ndims,) = struct.unpack_from("<B", buf, pos)
            dims = struct.unpack_from(f"<{ndims}Q", buf, pos + 1)
            pos += 1 + 8 * ndims
            (clen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            cfg = parse_config(buf[pos : pos + clen].decode("utf-8"))
            pos += clen
            Fx, pos = FilterBank.from_bytes(buf, pos)
            Fy, pos = FilterBank.from_bytes(buf, pos)
            Wm, pos = tensor_from_bytes(buf, pos)
            (ridge,) = struct.unpack_from("<d", buf, pos)
            pos += 8
        except struct.error as exc:
            raise FormatError(f"truncated model file: {exc}") from None
        if pos != len(buf):
            raise FormatError(f"{len(buf) - pos} trailing bytes in model file")
        if Fx.K != K or Fx.d != d or Fx.rank != rank:
            raise FormatError("model header disagrees with filter payload")
        return cls(Fx, Fy, ChannelMap(Wm, ridge=ridge), cfg, dims)


def save_model(path, model):
    with open(path, "wb") as fh:
        fh.write(model.to_bytes())


def load_model(path):
    with open(path, "rb") as fh:
        return DoteModel.from_bytes(fh.read())


@dataclass
class TrainReport:
    """One row per outer sweep: joint objective, its terms and elapsed time."""

    objective: list = field(default_factory=list)
    terms: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    converged: bool = False

    def __len__(self):
        return len(self.objective)

    def to_csv(self):
        rows = ["iteration,objective," + ",".join(TERMS) + ",wall_time"]
        for i, (obj, br, t) in enumerate(zip(self.objective, self.terms, self.wall_time), 1):
            vals = ",".join(repr(br[name]) for name in TERMS)
            rows.append(f"{i},{obj!r},{vals},{t:.6f}")
        return "\n".join(rows) + "\n"


def _pairs_of(dataset):
    pairs = list(getattr(dataset, "pairs", dataset))
    if not pairs:
        raise InvalidInputError("training set is empty")
    X = [as_tensor(x, name="source image") for x, _ in pairs]
    Y = [as_tensor(y, name="target image") for _, y in pairs]
    dims = X[0].shape
    for i, (x, y) in enumerate(zip(X, Y)):
        if x.shape != dims or y.shape != dims:
            raise DimensionError(f"pair {i} has extents {x.shape}/{y.shape}, expected {dims}")
    return X, Y


def _sq(a):
    return float(np.sum(a * a))


def joint_objective(X, Y, model, Sx, Sy):
    """Evaluate the joint objective and its seven terms.

    Coupling terms are evaluated in the spatial domain with ``W`` mixing the
    channel axis at every voxel; the ``W^-1`` term is zero (and ``W^-1`` is
    never formed) when the model's config disables the dual loop.

    Returns
    -------
    total : float
    breakdown : dict
        Keyed by :data:`TERMS`.
    """
    if len(X) != len(Y) or len(X) != len(Sx) or len(X) != len(Sy) or not X:
        raise DimensionError("X, Y, Sx and Sy must be non-empty lists of equal length")
    cfg = model.config
    W = model.W
    br = dict.fromkeys(TERMS, 0.0)
    for x, y, sx, sy in zip(X, Y, Sx, Sy):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        sx = np.asarray(sx, dtype=np.float64)
        sy = np.asarray(sy, dtype=np.float64)
        if x.shape != y.shape or sx.shape != (model.K,) + x.shape or sy.shape != sx.shape:
            raise DimensionError("image / feature-map extents are inconsistent")
        br["data_x"] += 0.5 * _sq(x - reconstruct(model.Fx, sx))
        br["data_y"] += 0.5 * _sq(y - reconstruct(model.Fy, sy))
        br["l1_x"] += cfg.lam * float(np.sum(np.abs(sx)))
        br["l1_y"] += cfg.lam * float(np.sum(np.abs(sy)))
        if cfg.beta > 0:
            br["coupling_primal"] += cfg.beta * _sq(sy - W.forward(sx))
            if cfg.dual_enabled:
                br["coupling_dual"] += cfg.beta * _sq(sx - W.backward(sy))
    br["mapping_ridge"] = cfg.gamma * _sq(W.matrix)
    return sum(br.values()), br


def _mapping_cost(W, Sx, Sy, cfg):
    cost = cfg.gamma * _sq(W.matrix)
    for sx, sy in zip(Sx, Sy):
        cost += cfg.beta * _sq(sy - W.forward(sx))
        if cfg.dual_enabled:
            cost += cfg.beta * _sq(sx - W.backward(sy))
    return cost


def _mapping_step(W, Sx, Sy, cfg, max_halvings=30):
    """Move ``W`` toward the closed-form ridge solution without raising the objective.

    The closed form minimizes the primal coupling plus ridge; the inverse
    coupling also depends on ``W``, so the step is backtracked along the
    segment from the current ``W`` until the ``W``-dependent part of the joint
    objective does not increase.
    """
    target = update_mapping(Sx, Sy, cfg.beta, cfg.gamma).matrix
    current = _mapping_cost(W, Sx, Sy, cfg)
    t = 1.0
    for _ in range(max_halvings):
        cand = ChannelMap((1.0 - t) * W.matrix + t * target)
        if _mapping_cost(cand, Sx, Sy, cfg) <= current:
            return cand
        t *= 0.5
    return W


def train(dataset, cfg=None, callback=None):
    """Learn ``Fx``, ``Fy`` and ``W`` from registered pairs.

    Parameters
    ----------
    dataset : PairedDataset or sequence of (source, target)
        Registered pairs; all images share one grid.
    cfg : SolverConfig, optional
    callback : callable, optional
        Called as ``callback(iteration, model, Sx, Sy)`` after each sweep.

    Returns
    -------
    model : DoteModel
    report : TrainReport
        ``report.converged`` tells whether the relative change of the joint
        objective fell below ``cfg.tol`` before ``cfg.max_outer`` sweeps.
    """
    cfg = cfg or SolverConfig()
    X, Y = _pairs_of(dataset)
    dims = X[0].shape
    if any(cfg.d > n for n in dims):
        raise DimensionError(f"filter support {cfg.d} exceeds image extents {dims}")
    rng = np.random.default_rng(cfg.seed)
    # both banks start from the same draw so that channel k pairs with channel k under W0 = I
    Fx = FilterBank.random(cfg.K, cfg.d, len(dims), rng)
    Fy = Fx
    W = ChannelMap.identity(cfg.K)
    Sx = [infer_feature_maps(x, Fx, cfg.lam, cfg)[0] for x in X]
    Sy = [W.forward(s) for s in Sx]
    terms = ("primal", "dual") if cfg.dual_enabled else ("primal",)

    report = TrainReport()
    start = time.perf_counter()
    prev = None
    for it in range(1, cfg.max_outer + 1):
        for i, (x, y) in enumerate(zip(X, Y)):
            Sx[i], Sy[i], _ = update_feature_maps_joint(
                x, y, Fx, Fy, W, cfg.lam, cfg.beta, cfg, terms=terms, init=(Sx[i], Sy[i])
            )
        Fx = update_filters(list(zip(X, Sx)), cfg.d, cfg, init=Fx)
        Fy = update_filters(list(zip(Y, Sy)), cfg.d, cfg, init=Fy)
        if cfg.beta > 0:
            W = _mapping_step(W, Sx, Sy, cfg)
        model = DoteModel(Fx, Fy, W, cfg, dims)
        total, br = joint_objective(X, Y, model, Sx, Sy)
        report.objective.append(total)
        report.terms.append(br)
        report.wall_time.append(time.perf_counter() - start)
        log.info("sweep %d: objective %.6g", it, total)
        if callback is not None:
            callback(it, model, Sx, Sy)
        if prev is not None and abs(prev - total) <= cfg.tol * max(abs(prev), np.finfo(float).tiny):
            report.converged = True
            break
        prev = total
    return model, report


def transport(model, Sx):
    """Target-domain maps ``W Sx`` (voxelwise channel mixing)."""
    return apply_channels(model.W.matrix, Sx)
