"""
Training harness — patch dataset, per-batch loss, the Adam loop that draws a
random sampling matrix and noise level for every batch, and the ablation
settings.
"""
import json
import logging
import time
from dataclasses import dataclass, field, replace
from itertools import product
from pathlib import Path

import numpy as np

from coast import autodiff as ad
from coast.autodiff import AdamState, Tensor
from coast.blocks import Image, list_images, read_image, to_luminance
from coast.config import TrainConfig, dump_train_config
from coast.errors import ConfigError, FormatError, NumericalError
from coast.fileutil import atomic_write_text
from coast.network import (
    CoastConfig,
    CoastParams,
    ConditionVector,
    count_params,
    init_params,
    load_checkpoint,
    save_checkpoint,
    unrolled_forward,
)
from coast.sampling import (
    SEED_LIMIT,
    AugmentedSet,
    SamplingMatrix,
    gen_frgm,
    load_matrix_dir,
    measure,
    rows_for_ratio,
    rpa_augment,
)
from models import EpochLoss, TrainRun

logger = logging.getLogger(__name__)

LOSS_CSV_HEADER = "epoch,mean_loss,seconds"


@dataclass
class PatchStore:
    """N_D flattened side×side luminance patches. Smaller sides crop the top-left corner."""

    side: int
    patches: np.ndarray
    _views: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return self.patches.shape[0]

    def view(self, side: int) -> np.ndarray:
        if side > self.side:
            raise ConfigError(f"patches were sampled at side {self.side}, cannot serve side {side}")
        if side == self.side:
            return self.patches
        if side not in self._views:
            squares = self.patches.reshape(-1, self.side, self.side)[:, :side, :side]
            self._views[side] = np.ascontiguousarray(squares.reshape(-1, side * side))
        return self._views[side]


@dataclass
class TrainedModel:
    """Weights plus the training metadata evaluation needs."""

    params: CoastParams
    matrices: AugmentedSet | None = None
    sigma_range: tuple[float, float] | None = None
    pnpd: bool | None = None
    name: str = ""

    @property
    def seen_seeds(self) -> set[int]:
        return self.matrices.seeds if self.matrices is not None else set()


@dataclass
class TrainState:
    params: CoastParams
    adam: AdamState
    rng: np.random.Generator
    matrices: AugmentedSet
    sigma_range: tuple[float, float]
    epoch: int = 0
    loss_history: list[float] = field(default_factory=list)
    checkpoint: Path | None = None
    run_id: int | None = None

    def model(self, pnpd: bool | None = None, name: str = "") -> TrainedModel:
        return TrainedModel(self.params, self.matrices, self.sigma_range, pnpd, name)


# ─── Dataset ──────────────────────────────────────────────────────────────────

def sample_patches(images: list[Image], count: int, side: int, seed: int) -> PatchStore:
    """Uniformly placed patches, each from an image chosen with probability ∝ its area."""
    if not images:
        raise FormatError("no usable training images")
    rng = np.random.default_rng(seed)
    areas = np.array([img.height * img.width for img in images], dtype=np.float64)
    choice = rng.choice(len(images), size=count, p=areas / areas.sum())
    patches = np.empty((count, side * side))
    for i, k in enumerate(choice):
        img = images[k]
        top = int(rng.integers(0, img.height - side + 1))
        left = int(rng.integers(0, img.width - side + 1))
        patches[i] = img.pixels[top : top + side, left : left + side].ravel()
    return PatchStore(side, patches)


def build_dataset(image_dir: str | Path, patch_count: int, patch_side: int, seed: int) -> PatchStore:
    if patch_count < 1 or patch_side < 1:
        raise ConfigError("patch_count and patch_side must be >= 1")
    images: list[Image] = []
    for path in list_images(image_dir):
        try:
            img = to_luminance(read_image(path))
        except FormatError as e:
            logger.warning("skipping %s: %s", path.name, e)
            continue
        if img.height < patch_side or img.width < patch_side:
            logger.warning("skipping %s: %dx%d is smaller than a %d-pixel patch",
                           path.name, img.width, img.height, patch_side)
            continue
        images.append(img)
    if not images:
        raise FormatError(f"every image in {image_dir} was skipped; nothing to train on")
    store = sample_patches(images, patch_count, patch_side, seed)
    logger.info("dataset: %d patches of %dx%d from %d images", len(store), patch_side, patch_side, len(images))
    return store


def build_matrix_set(config: TrainConfig) -> AugmentedSet:
    """Base matrices (one FRGM per (side, ratio), or the files in phi_dir) expanded by RPA."""
    if config.phi_dir is not None:
        bases: list = load_matrix_dir(config.phi_dir)
        if not bases:
            raise ConfigError(f"no sampling matrices found in {config.phi_dir}")
        for phi in bases:
            if phi.side > config.dataset_side:
                raise ConfigError(f"matrix {phi.matrix_id} (N={phi.cols}) does not fit {config.dataset_side}-pixel patches")
    else:
        bases = []
        for i, (side, ratio) in enumerate(product(config.patch_sides, config.ratios)):
            m = rows_for_ratio(ratio, side * side)
            if m < 1:
                raise ConfigError(f"ratio {ratio} leaves no measurements for {side}x{side} patches")
            bases.append((m, side * side, config.base_seed + i))
    return rpa_augment(bases, config.per_base, master_seed=config.seed)


# ─── Optimization ─────────────────────────────────────────────────────────────

def batch_loss(xhat, x) -> Tensor:
    """(1 / (N_b·N)) Σ ‖x̂ᵢ − xᵢ‖²."""
    return ad.mse(xhat, x)


def draw_batch_setup(rng: np.random.Generator, matrices: AugmentedSet, sigma_range: tuple[float, float]):
    """Uniform matrix, uniform σ in the range, and a noise seed; always three draws."""
    phi = matrices[int(rng.integers(len(matrices)))]
    lo, hi = sigma_range
    sigma = float(rng.uniform(lo, hi))
    noise_seed = int(rng.integers(1, SEED_LIMIT))
    return phi, sigma, noise_seed


def train_step(state: TrainState, x: np.ndarray, phi: SamplingMatrix, sigma: float, noise_seed: int) -> float:
    meas = measure(x, phi, sigma, seed=noise_seed)
    xhat = unrolled_forward(meas.y, phi, ConditionVector(phi.ratio, sigma), state.params, pnpd=False)
    loss = batch_loss(xhat, x)
    value = float(loss.value)
    if not np.isfinite(value):
        raise NumericalError(f"non-finite training loss ({value}) in epoch {state.epoch + 1}")
    params = state.params.parameters()
    ad.zero_grad(params)
    ad.backward(loss)
    ad.adam_step(params, None, state.adam)
    return value


def run_epoch(state: TrainState, store: PatchStore, batch_size: int) -> float:
    order = state.rng.permutation(len(store))
    losses = []
    for start in range(0, len(order) - batch_size + 1, batch_size):
        phi, sigma, noise_seed = draw_batch_setup(state.rng, state.matrices, state.sigma_range)
        x = store.view(phi.side)[order[start : start + batch_size]]
        losses.append(train_step(state, x, phi, sigma, noise_seed))
    return float(np.mean(losses))


def _seen_records(matrices: AugmentedSet) -> list[dict]:
    return [{"id": m.matrix_id, "seed": m.seed, "rows": m.rows, "cols": m.cols} for m in matrices]


def train(
    config: TrainConfig,
    store: PatchStore | None = None,
    matrices: AugmentedSet | None = None,
    session=None,
) -> TrainState:
    """
    Train from a fresh init. Per batch: draw Φ uniformly from the augmented
    set, σ uniformly from the range, measure, run the network without
    deblocking and take one Adam step. A non-finite loss or gradient aborts
    the run after dumping the last good weights.

    Writes <out_dir>/<run_name>/loss.csv, scheduled epochNNNN.ckpt files and
    final.ckpt. With a SQLAlchemy `session`, the run and its epoch losses are
    recorded as well.
    """
    if store is None:
        if config.image_dir is None:
            raise ConfigError("training needs image_dir")
        store = build_dataset(config.image_dir, config.patch_count, config.dataset_side, config.seed)
    if matrices is None:
        matrices = build_matrix_set(config)
    if len(store) < config.batch_size:
        raise ConfigError(f"{len(store)} patches cannot fill a batch of {config.batch_size}")
    if store.side < max(m.side for m in matrices):
        raise ConfigError(f"patches of side {store.side} are too small for the sampling matrices")

    params = init_params(config.coast, seed=config.seed)
    state = TrainState(
        params=params,
        adam=AdamState.fresh(params.parameters(), config.learning_rate),
        rng=np.random.default_rng([config.seed, 1]),
        matrices=matrices,
        sigma_range=tuple(config.sigma_range),
    )
    run_dir = Path(config.out_dir) / (config.run_name or f"run_seed{config.seed}")
    run_dir.mkdir(parents=True, exist_ok=True)
    loss_lines = [LOSS_CSV_HEADER]
    atomic_write_text(run_dir / "loss.csv", "\n".join(loss_lines) + "\n")

    run = _start_run(session, config, matrices) if session is not None else None
    state.run_id = run.id if run is not None else None
    logger.info("training %s: %d params, %d matrices, %d epochs",
                run_dir.name, params.count(), len(matrices), config.epochs)

    try:
        for epoch in range(config.epochs):
            state.epoch = epoch
            started = time.perf_counter()
            mean_loss = run_epoch(state, store, config.batch_size)
            seconds = time.perf_counter() - started if config.timings else 0.0
            state.loss_history.append(mean_loss)
            loss_lines.append(f"{epoch + 1},{mean_loss!r},{seconds:.3f}")
            atomic_write_text(run_dir / "loss.csv", "\n".join(loss_lines) + "\n")
            logger.info("epoch %d/%d: loss %.6g (%.1fs)", epoch + 1, config.epochs, mean_loss, seconds)
            if session is not None:
                _record_epoch(session, run, epoch + 1, mean_loss, seconds)
            if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(params, run_dir / f"epoch{epoch + 1:04d}.ckpt")
    except NumericalError:
        dump = run_dir / "last_good.ckpt"
        save_checkpoint(params, dump)
        logger.error("training diverged in epoch %d; last good weights in %s", state.epoch + 1, dump)
        if session is not None:
            run.status = "failed"
            run.checkpoint_path = str(dump.resolve())
            session.commit()
        raise

    state.epoch = config.epochs
    state.checkpoint = run_dir / "final.ckpt"
    save_checkpoint(params, state.checkpoint)
    if session is not None:
        run.status = "done"
        run.checkpoint_path = str(state.checkpoint.resolve())
        run.final_loss = state.loss_history[-1] if state.loss_history else None
        session.commit()
    return state


def _start_run(session, config: TrainConfig, matrices: AugmentedSet):
    lo, hi = config.sigma_range
    run = TrainRun(
        name=config.run_name or f"run_seed{config.seed}",
        config_json=json.dumps(dump_train_config(config)),
        seed=config.seed,
        sigma_lo=lo,
        sigma_hi=hi,
        per_base=matrices.per_base,
        seen_json=json.dumps(_seen_records(matrices)),
    )
    session.add(run)
    session.commit()
    return run


def _record_epoch(session, run, epoch: int, mean_loss: float, seconds: float) -> None:
    session.add(EpochLoss(run_id=run.id, epoch=epoch, mean_loss=mean_loss, seconds=seconds))
    session.commit()


# ─── Ablation ─────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class AblationSetting:
    key: str
    rpa: bool
    cu: str  # off / shared / unshared
    pnpd: bool

    @property
    def label(self) -> str:
        parts = ["RPA" if self.rpa else "no-RPA", f"CU-{self.cu}", "PnP-D" if self.pnpd else "no-PnP-D"]
        return f"({self.key}) " + ", ".join(parts)


ABLATION_SETTINGS = {
    "a": AblationSetting("a", rpa=False, cu="off", pnpd=False),
    "b": AblationSetting("b", rpa=True, cu="off", pnpd=False),
    "c": AblationSetting("c", rpa=True, cu="unshared", pnpd=False),
    "d": AblationSetting("d", rpa=True, cu="shared", pnpd=False),
    "e": AblationSetting("e", rpa=True, cu="shared", pnpd=True),
}


def ablation_config(key: str, base: TrainConfig) -> tuple[TrainConfig, AblationSetting]:
    setting = ABLATION_SETTINGS.get(key)
    if setting is None:
        raise ConfigError(f"unknown ablation setting {key!r}; choose from {', '.join(ABLATION_SETTINGS)}")
    coast = replace(
        base.coast,
        cu_enabled=setting.cu != "off",
        cu_shared=setting.cu != "unshared",
        pnpd=setting.pnpd,
    )
    per_base = base.per_base if setting.rpa else 1
    if setting.rpa and per_base < 2:
        raise ConfigError(f"ablation setting ({key}) needs N_S > 1, got {per_base}")
    run_name = f"{base.run_name or 'ablation'}_{key}"
    return replace(base, coast=coast, per_base=per_base, run_name=run_name), setting


@dataclass
class AblationResult:
    setting: AblationSetting
    parameters: int
    model: TrainedModel


def ablation_run(key: str, base: TrainConfig, store: PatchStore | None = None, session=None) -> AblationResult:
    """Train one ablation setting; the model carries the setting's deblocking flag for evaluation."""
    config, setting = ablation_config(key, base)
    state = train(config, store=store, session=session)
    model = state.model(pnpd=setting.pnpd, name=config.run_name)
    return AblationResult(setting, state.params.count(), model)


def ablation_parameter_counts(base_coast: CoastConfig) -> dict[str, int]:
    """Learnable parameter count of each setting at the given network size."""
    counts = {}
    for key, setting in ABLATION_SETTINGS.items():
        coast = replace(base_coast, cu_enabled=setting.cu != "off", cu_shared=setting.cu != "unshared")
        counts[key] = count_params(coast)
    return counts


# ─── Reloading ────────────────────────────────────────────────────────────────

def load_trained_model(checkpoint: str | Path, config: TrainConfig | None = None, session=None) -> TrainedModel:
    """
    Weights from a checkpoint plus the seen-matrix set and σ range, rebuilt
    from the training config when given, else from the recorded run.
    """
    checkpoint = Path(checkpoint)
    pnpd = config.coast.pnpd if config is not None else True
    params = load_checkpoint(checkpoint, pnpd=pnpd)
    if config is not None:
        return TrainedModel(params, build_matrix_set(config), tuple(config.sigma_range), pnpd, checkpoint.stem)
    if session is None:
        return TrainedModel(params, name=checkpoint.stem)

    run = (
        session.query(TrainRun)
        .filter(TrainRun.checkpoint_path == str(checkpoint.resolve()))
        .order_by(TrainRun.id.desc())
        .first()
    )
    if run is None:
        logger.warning("no recorded training run for %s; seen-matrix metadata unavailable", checkpoint)
        return TrainedModel(params, name=checkpoint.stem)
    records = run.seen
    if any(r["seed"] is None for r in records):
        raise ConfigError(f"run {run.name} used external matrices; pass its training config to rebuild them")
    matrices = [gen_frgm(r["rows"], r["cols"], r["seed"]) for r in records]
    seen = AugmentedSet(matrices, len(matrices) // run.per_base, run.per_base)
    return TrainedModel(params, seen, (run.sigma_lo, run.sigma_hi), pnpd, run.name)
