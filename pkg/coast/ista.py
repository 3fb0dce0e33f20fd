"""
Classical ISTA baseline with an l1 prior in an orthonormal per-patch transform,
and the minimum-norm least-squares reconstruction.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.fftpack import dct, idct
from scipy.linalg import solve

from coast.errors import ConfigError, DimensionError, NumericalError
from coast.sampling import MatrixKind, SamplingMatrix

logger = logging.getLogger(__name__)

ORTHONORMAL_TOL = 1e-10


class Transform(str, Enum):
    IDENTITY = "identity"
    DCT2 = "dct2"


@dataclass
class IstaConfig:
    lam: float = 0.01
    rho: float = 1.0
    max_iters: int = 400
    tol: float = 1e-6
    transform: Transform | np.ndarray = Transform.DCT2

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.rho <= 0:
            raise ConfigError(f"step size rho must be > 0, got {self.rho}")
        if self.tol <= 0:
            raise ConfigError(f"tol must be > 0, got {self.tol}")
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")
        if isinstance(self.transform, str):
            self.transform = Transform(self.transform)


@dataclass
class IstaResult:
    xhat: np.ndarray
    objective: list[float] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.objective)


def soft_threshold(v, tau: float) -> np.ndarray:
    """Proximal map of tau·|·|: sign(v)·max(|v| − tau, 0)."""
    if tau < 0:
        raise ConfigError(f"threshold must be >= 0, got {tau}")
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.maximum(np.abs(v) - tau, 0.0)


def _transform_pair(transform, n: int):
    """Forward/inverse maps acting on the rows of a B×N batch."""
    if isinstance(transform, np.ndarray):
        t = np.asarray(transform, dtype=np.float64)
        if t.shape != (n, n):
            raise ConfigError(f"transform must be {n}×{n}, got {t.shape}")
        if np.max(np.abs(t.T @ t - np.eye(n))) > ORTHONORMAL_TOL:
            raise ConfigError("transform matrix is not orthonormal")
        return (lambda x: x @ t.T), (lambda c: c @ t)
    if transform is Transform.IDENTITY:
        return (lambda x: x), (lambda c: c)
    side = int(round(np.sqrt(n)))
    if side * side != n:
        raise ConfigError(f"2-D DCT needs square patches, N={n}")

    def forward(x):
        blocks = x.reshape(-1, side, side)
        return dct(dct(blocks, axis=1, norm="ortho"), axis=2, norm="ortho").reshape(x.shape)

    def inverse(c):
        blocks = c.reshape(-1, side, side)
        return idct(idct(blocks, axis=1, norm="ortho"), axis=2, norm="ortho").reshape(c.shape)

    return forward, inverse


def objective(xhat: np.ndarray, phi: SamplingMatrix, y: np.ndarray, lam: float, forward) -> float:
    """½‖Φx̂ − y‖² + λ‖Tx̂‖₁, summed over patches."""
    residual = xhat @ phi.data.T - y
    return 0.5 * float(np.sum(residual * residual)) + lam * float(np.sum(np.abs(forward(xhat))))


def ista_solve(y, phi: SamplingMatrix, config: IstaConfig | None = None) -> IstaResult:
    """
    x̂ ← Tᵀ S(T(x̂ − ρΦᵀ(Φx̂ − y)), ρλ) from x̂ = 0, until the relative change
    of the iterate drops below tol or max_iters is reached.
    """
    config = config or IstaConfig()
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if y.shape[1] != phi.rows:
        raise DimensionError(f"measurements have {y.shape[1]} entries, matrix has M={phi.rows}")
    forward, inverse = _transform_pair(config.transform, phi.cols)
    a = phi.data
    xhat = np.zeros((y.shape[0], phi.cols))
    trace: list[float] = []
    for _ in range(config.max_iters):
        r = xhat - config.rho * ((xhat @ a.T - y) @ a)
        nxt = inverse(soft_threshold(forward(r), config.rho * config.lam))
        if not np.all(np.isfinite(nxt)):
            raise NumericalError("ISTA iterate became non-finite; reduce rho")
        change = np.linalg.norm(nxt - xhat)
        scale = max(np.linalg.norm(xhat), np.finfo(np.float64).tiny)
        xhat = nxt
        trace.append(objective(xhat, phi, y, config.lam, forward))
        if change / scale < config.tol:
            break
    logger.debug("ISTA stopped after %d iterations (objective %.6g)", len(trace), trace[-1])
    return IstaResult(xhat, trace)


def pinv_reconstruct(y, phi: SamplingMatrix) -> np.ndarray:
    """Minimum-norm least squares x̂ = Φᵀ(ΦΦᵀ)⁻¹y; just Φᵀy for an FRGM."""
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if y.shape[1] != phi.rows:
        raise DimensionError(f"measurements have {y.shape[1]} entries, matrix has M={phi.rows}")
    a = phi.data
    if phi.kind is MatrixKind.FRGM:
        return y @ a
    gram = a @ a.T
    if np.linalg.matrix_rank(gram) < phi.rows:
        raise NumericalError("ΦΦᵀ is singular; the minimum-norm solution is undefined")
    coeffs = solve(gram, y.T, assume_a="pos")
    return coeffs.T @ a
