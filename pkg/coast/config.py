"""
Configuration — environment settings (via .env) and key=value training files.
"""
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from dotenv import load_dotenv

from coast.errors import ConfigError
from coast.network import CoastConfig

load_dotenv()

REPO_DIR = Path(__file__).resolve().parent.parent
DATABASE_URL = os.getenv("COAST_DATABASE_URL", f"sqlite:///{REPO_DIR / 'instance' / 'coast.db'}")
LOG_LEVEL = os.getenv("COAST_LOG_LEVEL", "INFO")
OUT_DIR = Path(os.getenv("COAST_OUT_DIR", "runs"))
WORKERS = int(os.getenv("COAST_WORKERS", 1))

CU_MODES = ("off", "shared", "unshared")


@dataclass
class TrainConfig:
    image_dir: Path | None = None
    patch_count: int = 5000
    patch_side: int = 33
    batch_size: int = 64
    epochs: int = 40
    learning_rate: float = 1e-4
    seed: int = 0
    sigma_range: tuple[float, float] = (0.0, 0.0)
    ratios: tuple[float, ...] = (0.1, 0.3, 0.5)
    patch_sides: tuple[int, ...] = ()
    per_base: int = 5
    base_seed: int = 1
    phi_dir: Path | None = None
    coast: CoastConfig = field(default_factory=lambda: CoastConfig(phases=5, blocks=3, channels=16))
    checkpoint_every: int = 0
    out_dir: Path = OUT_DIR
    timings: bool = True
    run_name: str = ""

    def __post_init__(self):
        if not self.patch_sides:
            self.patch_sides = (self.patch_side,)
        self.validate()

    @property
    def dataset_side(self) -> int:
        return max(self.patch_sides)

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patch_count < self.batch_size:
            raise ConfigError(f"patch_count ({self.patch_count}) must be >= batch_size ({self.batch_size})")
        lo, hi = self.sigma_range
        if not 0.0 <= lo <= hi:
            raise ConfigError(f"sigma range must satisfy 0 <= lo <= hi, got [{lo}, {hi}]")
        if self.epochs < 0 or self.checkpoint_every < 0:
            raise ConfigError("epochs and checkpoint_every must be non-negative")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.per_base < 1:
            raise ConfigError(f"per_base (N_S) must be >= 1, got {self.per_base}")
        if any(s < 1 for s in self.patch_sides) or self.patch_side < 1:
            raise ConfigError("patch sides must be >= 1")
        if self.phi_dir is None and not all(0.0 < r <= 1.0 for r in self.ratios):
            raise ConfigError(f"ratios must lie in (0, 1], got {self.ratios}")


PRESETS: dict[str, dict] = {
    "desk": dict(
        patch_count=5000, patch_side=33, batch_size=64, epochs=40, learning_rate=1e-4,
        ratios=(0.1, 0.3, 0.5), per_base=5, coast=CoastConfig(phases=5, blocks=3, channels=16),
    ),
    "full": dict(
        patch_count=88912, patch_side=33, batch_size=64, epochs=400, learning_rate=1e-4,
        ratios=(0.1, 0.2, 0.3, 0.4, 0.5), per_base=25, coast=CoastConfig(phases=20, blocks=3, channels=32),
    ),
}


# ─── Value parsing ────────────────────────────────────────────────────────────

def parse_sigma(text: str) -> float:
    """'0.02' or '10/255' -> normalized noise level."""
    text = text.strip()
    try:
        if "/" in text:
            num, den = text.split("/", 1)
            return float(num) / float(den)
        return float(text)
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"invalid sigma value: {text!r}") from None


def parse_cu_mode(mode: str) -> tuple[bool, bool]:
    """'off' | 'shared' | 'unshared' -> (cu_enabled, cu_shared)."""
    mode = mode.strip().lower()
    if mode not in CU_MODES:
        raise ConfigError(f"cu must be one of {', '.join(CU_MODES)}, got {mode!r}")
    return mode != "off", mode != "unshared"


def _int(key: str, text: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {text!r}") from None


def _float(key: str, text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {text!r}") from None


def _bool(key: str, text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


def _list(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


INT_KEYS = {"patch_count", "patch_side", "batch_size", "epochs", "seed", "per_base", "base_seed", "checkpoint_every"}
COAST_KEYS = {"phases", "blocks", "channels", "cu"}


def train_config_from_pairs(pairs: dict[str, str]) -> TrainConfig:
    """Build a TrainConfig from string key/value pairs (preset first, then overrides)."""
    pairs = dict(pairs)
    values: dict = {}
    preset = pairs.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
        values.update(PRESETS[preset])

    coast = values.get("coast", CoastConfig(phases=5, blocks=3, channels=16))
    sigma_lo, sigma_hi = 0.0, 0.0
    for key, raw in pairs.items():
        if key in INT_KEYS:
            values[key] = _int(key, raw)
        elif key == "learning_rate":
            values[key] = _float(key, raw)
        elif key == "sigma_lo":
            sigma_lo = parse_sigma(raw)
        elif key == "sigma_hi":
            sigma_hi = parse_sigma(raw)
        elif key == "ratios":
            values[key] = tuple(_float(key, r) for r in _list(raw))
        elif key == "patch_sides":
            values[key] = tuple(_int(key, s) for s in _list(raw))
        elif key in ("image_dir", "phi_dir", "out_dir"):
            values[key] = Path(raw.strip())
        elif key == "timings":
            values[key] = _bool(key, raw)
        elif key == "run_name":
            values[key] = raw.strip()
        elif key in ("phases", "blocks", "channels"):
            coast = replace(coast, **{key: _int(key, raw)})
        elif key == "cu":
            enabled, shared = parse_cu_mode(raw)
            coast = replace(coast, cu_enabled=enabled, cu_shared=shared)
        else:
            raise ConfigError(f"unknown configuration key {key!r}")
    values["coast"] = coast
    values["sigma_range"] = (sigma_lo, sigma_hi)
    try:
        return TrainConfig(**values)
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from None


def parse_pairs(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def load_train_config(path: str | Path) -> TrainConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return train_config_from_pairs(parse_pairs(text))


def dump_train_config(config: TrainConfig) -> dict:
    """Plain-JSON view of a TrainConfig, stored alongside each training run."""
    c = config.coast
    return {
        "image_dir": str(config.image_dir) if config.image_dir else None,
        "patch_count": config.patch_count,
        "patch_side": config.patch_side,
        "patch_sides": list(config.patch_sides),
        "batch_size": config.batch_size,
        "epochs": config.epochs,
        "learning_rate": config.learning_rate,
        "seed": config.seed,
        "sigma_range": list(config.sigma_range),
        "ratios": list(config.ratios),
        "per_base": config.per_base,
        "base_seed": config.base_seed,
        "phi_dir": str(config.phi_dir) if config.phi_dir else None,
        "phases": c.phases,
        "blocks": c.blocks,
        "channels": c.channels,
        "cu": c.cu_mode,
    }
