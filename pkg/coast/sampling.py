"""
Sampling subnet — FRGM construction, random projection augmentation (RPA),
noisy block measurements and the binary matrix/measurement file formats.
"""
import logging
import math
import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import qr

from coast.blocks import PatchGrid
from coast.errors import ContractError, DimensionError, FormatError, OrthonormalizationError
from coast.fileutil import atomic_write_bytes

logger = logging.getLogger(__name__)

MATRIX_MAGIC = b"COASTPHI"
MATRIX_HEADER = struct.Struct("<8sIIBQ")  # magic, M, N, kind, seed
MEASUREMENT_MAGIC = b"COASTY"
MEASUREMENT_HEADER = struct.Struct("<6sIIdB")  # magic, rows, M, sigma, id length
ORTHONORMAL_TOL = 1e-10
SEED_LIMIT = 2 ** 62


class MatrixKind(IntEnum):
    FRGM = 0
    EXTERNAL = 1


def _perfect_square_side(n: int) -> int | None:
    side = math.isqrt(n)
    return side if side * side == n else None


def rows_for_ratio(ratio: float, n: int) -> int:
    """M = round(γ·N), halves rounded up (0.5·1089 -> 545)."""
    return int(math.floor(ratio * n + 0.5))


@dataclass(frozen=True, eq=False)
class SamplingMatrix:
    """An immutable M×N sampling matrix Φ with provenance."""

    data: np.ndarray
    kind: MatrixKind = MatrixKind.FRGM
    seed: int | None = None
    label: str = ""

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise DimensionError(f"sampling matrix must be 2-D, got shape {data.shape}")
        m, n = data.shape
        if not 0 < m <= n:
            raise DimensionError(f"sampling matrix needs 0 < M <= N, got {m}×{n}")
        if _perfect_square_side(n) is None:
            raise DimensionError(f"N={n} is not a perfect square")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "kind", MatrixKind(self.kind))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def ratio(self) -> float:
        return self.rows / self.cols

    @property
    def side(self) -> int:
        return math.isqrt(self.cols)

    @property
    def matrix_id(self) -> str:
        if self.label:
            return self.label
        tag = self.seed if self.seed is not None else "ext"
        return f"phi_{self.rows}x{self.cols}_{tag}"

    def orthonormality_error(self) -> float:
        gram = self.data @ self.data.T
        return float(np.max(np.abs(gram - np.eye(self.rows))))

    def __repr__(self) -> str:
        return f"SamplingMatrix({self.matrix_id}, kind={self.kind.name})"


@dataclass
class AugmentedSet:
    """L groups of N_S matrices; each group starts with its base matrix."""

    matrices: list[SamplingMatrix]
    base_count: int
    per_base: int

    def __post_init__(self):
        if len(self.matrices) != self.base_count * self.per_base:
            raise ContractError(
                f"augmented set holds {len(self.matrices)} matrices, expected {self.base_count}×{self.per_base}"
            )
        for group in self.groups():
            if any(m.data.shape != group[0].data.shape for m in group):
                raise ContractError("matrices within an RPA group must share (M, N)")

    def __len__(self) -> int:
        return len(self.matrices)

    def __getitem__(self, i: int) -> SamplingMatrix:
        return self.matrices[i]

    def groups(self) -> list[list[SamplingMatrix]]:
        k = self.per_base
        return [self.matrices[i * k : (i + 1) * k] for i in range(self.base_count)]

    @property
    def bases(self) -> list[SamplingMatrix]:
        return [g[0] for g in self.groups()]

    @property
    def seeds(self) -> set[int]:
        return {m.seed for m in self.matrices if m.seed is not None}

    @property
    def ratios(self) -> list[float]:
        return sorted({m.ratio for m in self.matrices})


@dataclass
class Measurement:
    y: np.ndarray
    sigma: float
    matrix_id: str = ""

    @property
    def rows(self) -> int:
        return self.y.shape[0]

    @property
    def m(self) -> int:
        return self.y.shape[1]


# ─── Generation ───────────────────────────────────────────────────────────────

def gen_frgm(m: int, n: int, seed: int) -> SamplingMatrix:
    """Seeded Gaussian M×N matrix with orthonormalized rows (ΦΦᵀ = I)."""
    if m < 1 or n < 1:
        raise OrthonormalizationError(f"matrix dimensions must be positive, got {m}×{n}")
    if m > n:
        raise OrthonormalizationError(f"cannot orthonormalize {m} rows in dimension {n} (M > N)")
    gaussian = np.random.default_rng(seed).standard_normal((m, n))
    q, _ = qr(gaussian.T, mode="economic")  # columns of q span the rows of gaussian
    phi = q.T
    first = np.argmax(phi != 0.0, axis=1)
    signs = np.sign(phi[np.arange(m), first])
    signs[signs == 0] = 1.0
    return SamplingMatrix(phi * signs[:, None], MatrixKind.FRGM, seed)


def _base_matrix(base) -> SamplingMatrix:
    if isinstance(base, SamplingMatrix):
        return base
    m, n, seed = base
    return gen_frgm(m, n, seed)


def rpa_augment(bases: Sequence, per_base: int, master_seed: int) -> AugmentedSet:
    """
    Random projection augmentation: each base (an (M, N, seed) triple or a
    SamplingMatrix) is followed by per_base - 1 fresh FRGMs of its shape.
    """
    if per_base < 1:
        raise ContractError(f"N_S must be >= 1, got {per_base}")
    base_matrices = [_base_matrix(b) for b in bases]
    used = {m.seed for m in base_matrices if m.seed is not None}
    rng = np.random.default_rng(master_seed)
    matrices: list[SamplingMatrix] = []
    for base in base_matrices:
        matrices.append(base)
        produced = 1
        while produced < per_base:
            seed = int(rng.integers(1, SEED_LIMIT))
            while seed in used:
                seed += 1
            used.add(seed)
            extra = gen_frgm(base.rows, base.cols, seed)
            if np.array_equal(extra.data, base.data):
                continue
            matrices.append(extra)
            produced += 1
    logger.debug("RPA: %d bases x %d -> %d matrices", len(base_matrices), per_base, len(matrices))
    return AugmentedSet(matrices, len(base_matrices), per_base)


def measure(x, phi: SamplingMatrix, sigma: float, seed: int | None = None) -> Measurement:
    """y_i = Φ(x_i + n_i) for every patch, n_i ~ N(0, σ²) elementwise."""
    patches = x.patches if isinstance(x, PatchGrid) else np.atleast_2d(np.asarray(x, dtype=np.float64))
    if patches.shape[1] != phi.cols:
        raise DimensionError(f"patch dimension N={patches.shape[1]} does not match sampling matrix N={phi.cols}")
    if not sigma >= 0.0:
        raise ContractError(f"noise level must be >= 0, got {sigma}")
    if sigma > 0.0:
        patches = patches + np.random.default_rng(seed).normal(0.0, sigma, patches.shape)
    return Measurement(patches @ phi.data.T, float(sigma), phi.matrix_id)


# ─── Matrix files ─────────────────────────────────────────────────────────────

def matrix_filename(phi: SamplingMatrix) -> str:
    return f"phi_{phi.rows}x{phi.cols}_{phi.seed if phi.seed is not None else 0}.bin"


def encode_matrix(phi: SamplingMatrix) -> bytes:
    header = MATRIX_HEADER.pack(MATRIX_MAGIC, phi.rows, phi.cols, int(phi.kind), phi.seed or 0)
    return header + phi.data.astype("<f8").tobytes()


def decode_matrix(data: bytes, label: str = "") -> SamplingMatrix:
    if data[: len(MATRIX_MAGIC)] != MATRIX_MAGIC:
        raise FormatError(f"bad magic {data[:8]!r}, expected {MATRIX_MAGIC!r}", offset=0)
    if len(data) < MATRIX_HEADER.size:
        raise FormatError("truncated matrix header", offset=len(data))
    _, m, n, kind, seed = MATRIX_HEADER.unpack_from(data)
    if m == 0 or n == 0 or m > n:
        raise FormatError(f"invalid matrix dimensions {m}×{n}", offset=8)
    if _perfect_square_side(n) is None:
        raise FormatError(f"N={n} is not a perfect square", offset=12)
    if kind not in (MatrixKind.FRGM, MatrixKind.EXTERNAL):
        raise FormatError(f"unknown matrix kind {kind}", offset=16)
    expected = m * n * 8
    payload = data[MATRIX_HEADER.size :]
    if len(payload) < expected:
        raise FormatError(f"truncated payload: {len(payload)} of {expected} bytes", offset=len(data))
    if len(payload) > expected:
        raise FormatError("trailing bytes after matrix payload", offset=MATRIX_HEADER.size + expected)
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(m, n)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise FormatError("non-finite matrix entry", offset=MATRIX_HEADER.size + 8 * int(bad[0]))
    phi = SamplingMatrix(values, MatrixKind(kind), seed or None, label)
    if phi.kind is MatrixKind.FRGM and phi.orthonormality_error() >= ORTHONORMAL_TOL:
        raise FormatError(
            f"FRGM rows are not orthonormal (max deviation {phi.orthonormality_error():.3e})",
            offset=MATRIX_HEADER.size,
        )
    return phi


def save_matrix(phi: SamplingMatrix, path: str | Path) -> None:
    atomic_write_bytes(path, encode_matrix(phi))


def load_matrix(path: str | Path) -> SamplingMatrix:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read matrix {path}: {e}") from None
    return decode_matrix(data)


def load_matrix_dir(directory: str | Path) -> list[SamplingMatrix]:
    """Every *.bin matrix file in a directory, sorted by name, labelled by stem."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FormatError(f"matrix directory not found: {directory}")
    matrices = []
    for path in sorted(directory.glob("*.bin")):
        phi = load_matrix(path)
        if phi.kind is MatrixKind.EXTERNAL:
            phi = SamplingMatrix(phi.data, phi.kind, phi.seed, path.stem)
        matrices.append(phi)
    if not matrices:
        raise FormatError(f"no matrix files in {directory}")
    return matrices


# ─── Measurement files ────────────────────────────────────────────────────────

def save_measurement(meas: Measurement, path: str | Path) -> None:
    ident = meas.matrix_id.encode("utf-8")[:255]
    header = MEASUREMENT_HEADER.pack(MEASUREMENT_MAGIC, meas.rows, meas.m, meas.sigma, len(ident))
    atomic_write_bytes(path, header + ident + np.asarray(meas.y, dtype="<f8").tobytes())


def load_measurement(path: str | Path) -> Measurement:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read measurement {path}: {e}") from None
    if data[: len(MEASUREMENT_MAGIC)] != MEASUREMENT_MAGIC:
        raise FormatError(f"bad magic {data[:6]!r}, expected {MEASUREMENT_MAGIC!r}", offset=0)
    if len(data) < MEASUREMENT_HEADER.size:
        raise FormatError("truncated measurement header", offset=len(data))
    _, rows, m, sigma, id_len = MEASUREMENT_HEADER.unpack_from(data)
    start = MEASUREMENT_HEADER.size + id_len
    expected = rows * m * 8
    if len(data) != start + expected:
        raise FormatError(f"measurement payload should be {expected} bytes", offset=min(len(data), start + expected))
    ident = data[MEASUREMENT_HEADER.size : start].decode("utf-8", errors="replace")
    y = np.frombuffer(data[start:], dtype="<f8").astype(np.float64).reshape(rows, m)
    return Measurement(y, sigma, ident)
