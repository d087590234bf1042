"""Solver hyperparameters and their flat ``key=value`` text form."""

from dataclasses import asdict, dataclass, fields, replace

from .errors import InvalidInputError

__all__ = ["SolverConfig", "parse_config", "format_config", "load_config"]

# config-file key -> dataclass field
_KEYS = {
    "lambda": "lam",
    "beta": "beta",
    "gamma": "gamma",
    "sigma": "sigma",
    "k": "K",
    "d": "d",
    "max_outer": "max_outer",
    "max_inner": "max_inner",
    "tol": "tol",
    "seed": "seed",
    "dual_enabled": "dual_enabled",
}
_FIELDS = {v: k for k, v in _KEYS.items()}


@dataclass(frozen=True)
class SolverConfig:
    """Hyperparameters shared by the solvers and the trainer.

    Attributes
    ----------
    lam : float
        Weight of the l1 penalty on feature maps.
    beta : float
        Weight of the feature-map coupling terms.
    gamma : float
        Ridge weight on the channel mapping.
    sigma : float
        ADMM penalty parameter (fixed).
    K : int
        Number of filters per domain.
    d : int
        Odd filter support along every axis.
    max_outer, max_inner : int
        Iteration caps for the alternation and for each ADMM subproblem.
    tol : float
        Relative tolerance for both ADMM residuals and the outer objective.
    seed : int
        Seed for filter initialization.
    dual_enabled : bool
        ``False`` drops the inverse-mapping feedback term (the "nodual" ablation).
    """

    lam: float = 0.05
    beta: float = 0.10
    gamma: float = 0.15
    sigma: float = 1.0
    K: int = 16
    d: int = 5
    max_outer: int = 15
    max_inner: int = 50
    tol: float = 1e-4
    seed: int = 0
    dual_enabled: bool = True

    def __post_init__(self):
        for name in ("lam", "beta", "gamma"):
            if not getattr(self, name) >= 0:
                raise InvalidInputError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not self.sigma > 0:
            raise InvalidInputError(f"sigma must be > 0, got {self.sigma}")
        if self.K < 1:
            raise InvalidInputError(f"K must be >= 1, got {self.K}")
        if self.d < 1 or self.d % 2 == 0:
            raise InvalidInputError(f"d must be a positive odd integer, got {self.d}")
        if self.max_outer < 1 or self.max_inner < 1:
            raise InvalidInputError("iteration caps must be >= 1")
        if not self.tol > 0:
            raise InvalidInputError(f"tol must be > 0, got {self.tol}")

    def replace(self, **changes):
        return replace(self, **changes)


def _coerce(field_type, key, text):
    try:
        if field_type is bool:
            low = text.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return field_type(text.strip())
    except ValueError:
        raise InvalidInputError(f"bad value for {key!r}: {text!r}") from None


def parse_config(text, base=None):
    """Parse ``key=value`` lines over ``base`` (defaults if ``None``).

    Blank lines and ``#`` comments are ignored; unknown keys are errors.
    """
    types = {f.name: f.type for f in fields(SolverConfig)}
    types = {k: {"float": float, "int": int, "bool": bool}.get(v, v) for k, v in types.items()}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidInputError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS:
            raise InvalidInputError(f"line {lineno}: unknown config key {key!r}")
        name = _KEYS[key]
        values[name] = _coerce(types[name], key, value)
    return replace(base or SolverConfig(), **values)


def format_config(cfg):
    """Inverse of :func:`parse_config`; floats use ``repr`` so they round-trip."""
    lines = []
    for name, value in asdict(cfg).items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{_FIELDS[name]}={value!r}" if isinstance(value, float) else f"{_FIELDS[name]}={value}")
    return "\n".join(lines) + "\n"


def load_config(path, base=None):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), base)
