"""
Recovery subnet — the unrolled N_P-phase network: zero initialization, the
gradient-descent module (GDM), the controllable proximal mapping module (CPMM)
built from CU-modulated residual blocks, optional plug-and-play deblocking,
parameter accounting and the checkpoint format.
"""
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from coast import autodiff as ad
from coast.autodiff import Tensor
from coast.blocks import GridGeometry, fold, unfold
from coast.errors import ConfigError, ContractError, DimensionError, FormatError
from coast.fileutil import atomic_write_bytes

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"COASTCKPT"
CHECKPOINT_HEADER = struct.Struct("<9sIIIIBB")  # magic, version, N_P, N_C, C, cu_shared, cu_enabled
CHECKPOINT_VERSION = 1
CU_WEIGHT_STD = 0.01


@dataclass(frozen=True)
class CoastConfig:
    phases: int = 20
    blocks: int = 3
    channels: int = 32
    cu_shared: bool = True
    pnpd: bool = True
    cu_enabled: bool = True

    def __post_init__(self):
        for name in ("phases", "blocks", "channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def cu_mode(self) -> str:
        if not self.cu_enabled:
            return "off"
        return "shared" if self.cu_shared else "unshared"


@dataclass(frozen=True)
class ConditionVector:
    """z = [γ, σ] fed to the controllable unit; σ on the [0, 1] intensity scale."""

    gamma: float
    sigma: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.gamma) and math.isfinite(self.sigma)):
            raise ContractError(f"condition vector must be finite, got [{self.gamma}, {self.sigma}]")
        if not 0.0 < self.gamma <= 1.0 or self.sigma < 0.0:
            raise ContractError(f"condition vector out of range: gamma={self.gamma}, sigma={self.sigma}")

    def as_array(self) -> np.ndarray:
        return np.array([self.gamma, self.sigma], dtype=np.float64)


# ─── Parameters ───────────────────────────────────────────────────────────────

@dataclass
class CuParams:
    weight: Tensor  # C×2
    bias: Tensor  # C


@dataclass
class BlockParams:
    conv_a_w: Tensor
    conv_a_b: Tensor
    conv_b_w: Tensor
    conv_b_b: Tensor
    cu: CuParams | None = None  # only when CUs are unshared


@dataclass
class PhaseParams:
    rho: Tensor
    head_w: Tensor  # C×1×3×3
    head_b: Tensor
    blocks: list[BlockParams]
    tail_w: Tensor  # 1×C×3×3
    tail_b: Tensor


@dataclass
class CoastParams:
    config: CoastConfig
    phases: list[PhaseParams]
    cu: CuParams | None = None  # the shared CU

    def cu_for(self, phase: int, block: int) -> CuParams | None:
        if not self.config.cu_enabled:
            return None
        if self.config.cu_shared:
            return self.cu
        return self.phases[phase].blocks[block].cu

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """Canonical (checkpoint) order: phase-major, then every CU last."""
        named: list[tuple[str, Tensor]] = []
        for k, phase in enumerate(self.phases):
            named += [(f"phase{k}.head.weight", phase.head_w), (f"phase{k}.head.bias", phase.head_b)]
            for j, block in enumerate(phase.blocks):
                named += [
                    (f"phase{k}.block{j}.conv_a.weight", block.conv_a_w),
                    (f"phase{k}.block{j}.conv_a.bias", block.conv_a_b),
                    (f"phase{k}.block{j}.conv_b.weight", block.conv_b_w),
                    (f"phase{k}.block{j}.conv_b.bias", block.conv_b_b),
                ]
            named += [
                (f"phase{k}.tail.weight", phase.tail_w),
                (f"phase{k}.tail.bias", phase.tail_b),
                (f"phase{k}.rho", phase.rho),
            ]
        if self.config.cu_enabled:
            if self.config.cu_shared:
                named += [("cu.weight", self.cu.weight), ("cu.bias", self.cu.bias)]
            else:
                for k, phase in enumerate(self.phases):
                    for j, block in enumerate(phase.blocks):
                        named += [(f"phase{k}.block{j}.cu.weight", block.cu.weight),
                                  (f"phase{k}.block{j}.cu.bias", block.cu.bias)]
        return named

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def count(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def flat(self) -> np.ndarray:
        return np.concatenate([p.value.ravel() for p in self.parameters()])

    def load_flat(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.size != self.count():
            raise DimensionError(f"expected {self.count()} parameter values, got {values.size}")
        offset = 0
        for p in self.parameters():
            size = p.value.size
            p.value = values[offset : offset + size].reshape(p.shape).copy()
            offset += size


def count_params(config: CoastConfig) -> int:
    c, nc = config.channels, config.blocks
    per_phase = (9 * c + c) + nc * 2 * (9 * c * c + c) + (9 * c + 1) + 1
    cu = 2 * c + c
    if not config.cu_enabled:
        cu_total = 0
    elif config.cu_shared:
        cu_total = cu
    else:
        cu_total = config.phases * nc * cu
    return config.phases * per_phase + cu_total


def _conv_weight(rng: np.random.Generator, c_out: int, c_in: int, name: str) -> Tensor:
    std = math.sqrt(2.0 / (9 * c_in))
    return ad.parameter(rng.normal(0.0, std, (c_out, c_in, 3, 3)), name)


def _zeros(shape, name: str) -> Tensor:
    return ad.parameter(np.zeros(shape), name)


def init_params(config: CoastConfig, seed: int = 0) -> CoastParams:
    """
    Fan-in-scaled normal convs with zero biases, ρ = 1, and a CU that starts
    close to identity modulation (bias 1, weight ~ N(0, 0.01²)). Unshared CUs
    are identical copies of one draw.
    """
    rng = np.random.default_rng(seed)
    c = config.channels
    phases = []
    for k in range(config.phases):
        head_w = _conv_weight(rng, c, 1, f"phase{k}.head.weight")
        head_b = _zeros(c, f"phase{k}.head.bias")
        blocks = []
        for j in range(config.blocks):
            blocks.append(BlockParams(
                conv_a_w=_conv_weight(rng, c, c, f"phase{k}.block{j}.conv_a.weight"),
                conv_a_b=_zeros(c, f"phase{k}.block{j}.conv_a.bias"),
                conv_b_w=_conv_weight(rng, c, c, f"phase{k}.block{j}.conv_b.weight"),
                conv_b_b=_zeros(c, f"phase{k}.block{j}.conv_b.bias"),
            ))
        tail_w = _conv_weight(rng, 1, c, f"phase{k}.tail.weight")
        tail_b = _zeros(1, f"phase{k}.tail.bias")
        rho = ad.parameter(np.ones(1), f"phase{k}.rho")
        phases.append(PhaseParams(rho, head_w, head_b, blocks, tail_w, tail_b))

    shared = None
    if config.cu_enabled:
        cu_weight = rng.normal(0.0, CU_WEIGHT_STD, (c, 2))
        cu_bias = np.ones(c)
        if config.cu_shared:
            shared = CuParams(ad.parameter(cu_weight, "cu.weight"), ad.parameter(cu_bias, "cu.bias"))
        else:
            for k, phase in enumerate(phases):
                for j, block in enumerate(phase.blocks):
                    block.cu = CuParams(ad.parameter(cu_weight, f"phase{k}.block{j}.cu.weight"),
                                        ad.parameter(cu_bias, f"phase{k}.block{j}.cu.bias"))
    params = CoastParams(config, phases, shared)
    return params


# ─── Modules ──────────────────────────────────────────────────────────────────

def init_x0(phi, y) -> np.ndarray:
    """x̂⁽⁰⁾ = 0 for every patch."""
    y = np.atleast_2d(np.asarray(y))
    return np.zeros((y.shape[0], phi.cols))


def gdm(xhat, phi, y, rho) -> Tensor:
    """r = x̂ − ρ·Φᵀ(Φx̂ − y), with patches as rows."""
    xhat = xhat if isinstance(xhat, Tensor) else Tensor(np.atleast_2d(xhat))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if xhat.shape[1] != phi.cols or y.shape != (xhat.shape[0], phi.rows):
        raise DimensionError(
            f"GDM: x̂ {xhat.shape} and y {y.shape} do not fit a {phi.rows}×{phi.cols} matrix"
        )
    rho = rho if isinstance(rho, Tensor) else Tensor(np.array([rho], dtype=np.float64))
    residual = ad.sub(ad.matmul(xhat, phi.data.T), y)
    return ad.sub(xhat, ad.scale(ad.matmul(residual, phi.data), rho))


def cu_forward(z: ConditionVector, cu: CuParams) -> Tensor:
    """Channel modulation W_CU·z + b_CU (no activation)."""
    return ad.fc(z.as_array(), cu.weight, cu.bias)


def cpmb_forward(features: Tensor, z: ConditionVector, block: BlockParams, cu: CuParams | None) -> Tensor:
    """F + s(z) ⊙ W_b(ReLU(W_a(F))); s ≡ 1 when the CU is disabled."""
    out = ad.conv2d(ad.relu(ad.conv2d(features, block.conv_a_w, block.conv_a_b)), block.conv_b_w, block.conv_b_b)
    if cu is not None:
        out = ad.channel_scale(out, cu_forward(z, cu))
    return ad.add(out, features)


def cpmm_forward(r: Tensor, z: ConditionVector, params: CoastParams, phase: int) -> Tensor:
    """r + W₂(CPMB_{N_C}(…CPMB₁(W₁(r))…)) on a B×1×H×W input."""
    r = r if isinstance(r, Tensor) else Tensor(r)
    if r.value.ndim != 4 or r.shape[1] != 1:
        raise DimensionError(f"CPMM expects a single-channel B×1×H×W input, got {r.shape}")
    p = params.phases[phase]
    h = ad.conv2d(r, p.head_w, p.head_b)
    for j, block in enumerate(p.blocks):
        h = cpmb_forward(h, z, block, params.cu_for(phase, j))
    return ad.add(r, ad.conv2d(h, p.tail_w, p.tail_b))


def unrolled_forward(
    y,
    phi,
    z: ConditionVector,
    params: CoastParams,
    geometry: GridGeometry | None = None,
    pnpd: bool = False,
) -> Tensor:
    """
    Run all phases and return x̂⁽ᴺᴾ⁾ as a B×N patch batch. With `pnpd`, each
    CPMM sees the whole folded image (geometry required) instead of one patch.
    """
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    batch, side = y.shape[0], phi.side
    if pnpd:
        if geometry is None:
            raise DimensionError("plug-and-play deblocking needs the grid geometry")
        if geometry.count != batch or geometry.side != side:
            raise DimensionError(
                f"grid {geometry.rows}×{geometry.cols} of side {geometry.side} does not match "
                f"{batch} measurements from a side-{side} matrix"
            )
        to_image = lambda a: fold(a, geometry.rows, geometry.cols)
        to_patches = lambda a: unfold(a, side)

    xhat = Tensor(init_x0(phi, y))
    for k, phase in enumerate(params.phases):
        r = ad.reshape(gdm(xhat, phi, y, phase.rho), (batch, 1, side, side))
        if pnpd:
            r = ad.rearrange(r, to_image, to_patches)
        x = cpmm_forward(r, z, params, k)
        if pnpd:
            x = ad.rearrange(x, to_patches, to_image)
        xhat = ad.reshape(x, (batch, side * side))
    return xhat


def coast_forward(
    y,
    phi,
    z: ConditionVector,
    params: CoastParams,
    config: CoastConfig | None,
    geometry: GridGeometry,
    pnpd: bool | None = None,
) -> np.ndarray:
    """Reconstruct one image (H×W, cropped to its original size) from its block measurements."""
    config = config or params.config
    use_pnpd = config.pnpd if pnpd is None else pnpd
    with ad.no_grad():
        xhat = unrolled_forward(y, phi, z, params, geometry, pnpd=use_pnpd)
    batch = xhat.value.reshape(geometry.count, 1, geometry.side, geometry.side)
    return fold(batch, geometry.rows, geometry.cols)[0, 0, : geometry.height, : geometry.width].copy()


# ─── Checkpoints ──────────────────────────────────────────────────────────────

def encode_checkpoint(params: CoastParams) -> bytes:
    c = params.config
    header = CHECKPOINT_HEADER.pack(
        CHECKPOINT_MAGIC, CHECKPOINT_VERSION, c.phases, c.blocks, c.channels, int(c.cu_shared), int(c.cu_enabled)
    )
    return header + params.flat().astype("<f8").tobytes()


def decode_checkpoint(data: bytes, pnpd: bool = True) -> CoastParams:
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {data[:9]!r}, expected {CHECKPOINT_MAGIC!r}", offset=0)
    if len(data) < CHECKPOINT_HEADER.size:
        raise FormatError("truncated checkpoint header", offset=len(data))
    _, version, phases, blocks, channels, cu_shared, cu_enabled = CHECKPOINT_HEADER.unpack_from(data)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=9)
    try:
        config = CoastConfig(phases, blocks, channels, bool(cu_shared), pnpd, bool(cu_enabled))
    except ConfigError as e:
        raise FormatError(f"invalid checkpoint configuration: {e}", offset=13) from None
    expected = count_params(config) * 8
    payload = data[CHECKPOINT_HEADER.size :]
    if len(payload) != expected:
        raise FormatError(
            f"checkpoint payload is {len(payload)} bytes, expected {expected}",
            offset=CHECKPOINT_HEADER.size + min(len(payload), expected),
        )
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise FormatError("non-finite parameter value", offset=CHECKPOINT_HEADER.size + 8 * int(bad[0]))
    params = init_params(config, seed=0)
    params.load_flat(values)
    return params


def save_checkpoint(params: CoastParams, path: str | Path) -> None:
    atomic_write_bytes(path, encode_checkpoint(params))
    logger.info("checkpoint written: %s", path)


def load_checkpoint(path: str | Path, pnpd: bool = True) -> CoastParams:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read checkpoint {path}: {e}") from None
    return decode_checkpoint(data, pnpd=pnpd)
