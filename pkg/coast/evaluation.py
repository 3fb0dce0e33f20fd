"""
Evaluation — PSNR/SSIM and the experiment runners (seen vs unseen matrices,
N_S sweep, noise sweep, unseen ratios, phase count, ablation), all producing
EvalReport rows that serialize to one CSV schema.
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.ndimage import correlate

from coast import autodiff as ad
from coast.blocks import GridGeometry, Image, fold, list_images, partition, read_image, to_luminance, write_image
from coast.config import WORKERS, TrainConfig
from coast.errors import ConfigError, ContractError, DimensionError
from coast.fileutil import atomic_write_text
from coast.ista import IstaConfig, ista_solve, pinv_reconstruct
from coast.network import ConditionVector, coast_forward
from coast.sampling import SamplingMatrix, gen_frgm, measure, rows_for_ratio
from coast.training import PatchStore, TrainedModel, ablation_run, train
from models import EvalRow as EvalRecord

logger = logging.getLogger(__name__)

PSNR_IDENTICAL_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
METHODS = ("coast", "ista", "pinv")
UNSEEN_RATIOS = (0.24, 0.27, 0.33, 0.36)


# ─── Metrics ──────────────────────────────────────────────────────────────────

def _pixels(img) -> np.ndarray:
    arr = img.pixels if isinstance(img, Image) else np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"metrics need a single-channel H×W image, got shape {arr.shape}")
    return arr


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise DimensionError(f"images differ in size: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10·log10(1 / MSE) for intensities in [0, 1]; identical images score 99 dB."""
    a, b = _pair(a, b)
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        return PSNR_IDENTICAL_DB
    return float(10.0 * np.log10(1.0 / err))


def _gaussian_window() -> np.ndarray:
    half = SSIM_WINDOW // 2
    g = np.exp(-(np.arange(-half, half + 1) ** 2) / (2.0 * SSIM_SIGMA ** 2))
    window = np.outer(g, g)
    return window / window.sum()


def _filter_valid(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    half = SSIM_WINDOW // 2
    return correlate(img, window, mode="constant")[half:-half, half:-half]


def ssim(a, b) -> float:
    """Mean structural similarity over every full 11×11 Gaussian window (σ = 1.5, L = 1)."""
    a, b = _pair(a, b)
    if min(a.shape) < SSIM_WINDOW:
        raise DimensionError(f"SSIM needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {a.shape}")
    window = _gaussian_window()
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mu_a, mu_b = _filter_valid(a, window), _filter_valid(b, window)
    var_a = _filter_valid(a * a, window) - mu_a * mu_a
    var_b = _filter_valid(b * b, window) - mu_b * mu_b
    cov = _filter_valid(a * b, window) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ─── Reports ──────────────────────────────────────────────────────────────────

@dataclass
class ReportRow:
    dataset: str
    matrix_id: str
    seen: bool
    gamma: float
    sigma: float
    method: str
    psnr_db: float
    ssim: float
    seconds: float = 0.0

    def csv_line(self) -> str:
        return ",".join([
            self.dataset, self.matrix_id, "1" if self.seen else "0",
            f"{self.gamma:.4f}", f"{self.sigma:.6f}", self.method,
            f"{self.psnr_db:.4f}", f"{self.ssim:.6f}", f"{self.seconds:.3f}",
        ])


CSV_HEADER = ",".join(f.name for f in fields(ReportRow))


@dataclass
class EvalReport:
    experiment: str
    rows: list[ReportRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self) -> str:
        return "\n".join([CSV_HEADER] + [r.csv_line() for r in self.rows]) + "\n"

    def write_csv(self, path: str | Path) -> None:
        atomic_write_text(path, self.to_csv())
        logger.info("%s: %d rows -> %s", self.experiment, len(self.rows), path)

    def select(self, **criteria) -> list[ReportRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in criteria.items())]

    def mean_psnr(self, **criteria) -> float:
        picked = self.select(**criteria)
        if not picked:
            raise ContractError(f"no report rows match {criteria}")
        return float(np.mean([r.psnr_db for r in picked]))

    def store(self, session) -> None:
        for r in self.rows:
            session.add(EvalRecord(experiment=self.experiment, **asdict(r)))
        session.commit()


def seen_unseen_gap(report: EvalReport, gamma: float, method: str = "coast") -> float:
    """Mean seen PSNR minus mean unseen PSNR at one ratio."""
    return report.mean_psnr(gamma=gamma, seen=True, method=method) - report.mean_psnr(gamma=gamma, seen=False, method=method)


# ─── Reconstruction ───────────────────────────────────────────────────────────

class EvalImage(NamedTuple):
    name: str
    image: Image


def load_test_images(directory: str | Path) -> list[EvalImage]:
    images = [EvalImage(p.stem, to_luminance(read_image(p))) for p in list_images(directory)]
    if not images:
        raise ConfigError(f"no test images in {directory}")
    return images


def reconstruct(
    image: Image,
    phi: SamplingMatrix,
    sigma: float,
    method: str,
    model: TrainedModel | None = None,
    noise_seed: int | None = None,
    ista: IstaConfig | None = None,
) -> np.ndarray:
    """Measure every block of `image` with Φ and rebuild it with the named method (unclamped H×W)."""
    grid = partition(to_luminance(image), phi.side)
    meas = measure(grid, phi, sigma, seed=noise_seed)
    return reconstruct_measurement(meas.y, phi, grid.geometry, sigma, method, model, ista)


def reconstruct_measurement(
    y: np.ndarray,
    phi: SamplingMatrix,
    geometry: GridGeometry,
    sigma: float,
    method: str,
    model: TrainedModel | None = None,
    ista: IstaConfig | None = None,
) -> np.ndarray:
    if y.shape != (geometry.count, phi.rows):
        raise DimensionError(
            f"measurements of shape {y.shape} do not match a {geometry.rows}×{geometry.cols} grid "
            f"sampled by an M={phi.rows} matrix"
        )
    if method == "coast":
        if model is None:
            raise ContractError("coast reconstruction needs a trained model")
        z = ConditionVector(phi.ratio, sigma)
        return coast_forward(y, phi, z, model.params, None, geometry, model.pnpd)
    if method == "ista":
        patches = ista_solve(y, phi, ista).xhat
    elif method == "pinv":
        patches = pinv_reconstruct(y, phi)
    else:
        raise ConfigError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    batch = patches.reshape(geometry.count, 1, geometry.side, geometry.side)
    return fold(batch, geometry.rows, geometry.cols)[0, 0, : geometry.height, : geometry.width].copy()


@dataclass
class Cell:
    """One (image, matrix, σ, method) reconstruction to score."""

    test: EvalImage
    phi: SamplingMatrix
    sigma: float
    method: str
    seen: bool
    noise_seed: int


@dataclass
class CellRunner:
    model: TrainedModel | None
    timings: bool = True
    ista: IstaConfig | None = None
    save_dir: Path | None = None

    def __call__(self, cell: Cell) -> tuple[float, float, float]:
        started = time.perf_counter()
        with ad.no_grad():
            xhat = reconstruct(
                cell.test.image, cell.phi, cell.sigma, cell.method, self.model, cell.noise_seed, self.ista
            )
        seconds = time.perf_counter() - started if self.timings else 0.0
        xhat = np.clip(xhat, 0.0, 1.0)
        reference = to_luminance(cell.test.image)
        logger.debug("%s %s %s sigma=%.4f", cell.test.name, cell.phi.matrix_id, cell.method, cell.sigma)
        if self.save_dir is not None:
            name = f"{cell.test.name}_{cell.phi.matrix_id}_{cell.method}_s{cell.sigma:.4f}.png"
            write_image(Image(xhat), Path(self.save_dir) / name)
        return psnr(reference, xhat), ssim(reference, xhat), seconds


def _score(cells: list[Cell], runner: CellRunner, workers: int) -> list[tuple[float, float, float]]:
    if workers <= 1 or len(cells) < 2:
        return [runner(c) for c in cells]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(runner, cells))


def _noise_seeds(seed: int, count: int) -> list[int]:
    return [int(s) for s in np.random.default_rng(seed).integers(1, 2 ** 62, size=count)]


def _fresh_seeds(seed: int, count: int, taken: set[int]) -> list[int]:
    """seed+1, seed+2, … skipping every seed in `taken`."""
    seeds: list[int] = []
    candidate = seed
    while len(seeds) < count:
        candidate += 1
        if candidate not in taken:
            seeds.append(candidate)
    return seeds


def _per_image_rows(dataset: str, cells: list[Cell], scores) -> list[ReportRow]:
    return [
        ReportRow(f"{dataset}/{c.test.name}", c.phi.matrix_id, c.seen, c.phi.ratio, c.sigma, c.method, p, s, t)
        for c, (p, s, t) in zip(cells, scores)
    ]


def _averaged_row(dataset: str, phi: SamplingMatrix, seen: bool, sigma: float, method: str, scores) -> ReportRow:
    p, s, t = (float(np.mean(col)) for col in zip(*scores))
    return ReportRow(dataset, phi.matrix_id, seen, phi.ratio, sigma, method, p, s, t)


def seen_base(model: TrainedModel, gamma: float, side: int) -> SamplingMatrix:
    """The seen base matrix whose row count matches γ at this patch side."""
    if model.matrices is None:
        raise ContractError("model carries no seen-matrix set; evaluation needs the training metadata")
    m = rows_for_ratio(gamma, side * side)
    for base in model.matrices.bases:
        if base.rows == m and base.cols == side * side:
            return base
    raise ConfigError(f"no seen matrix with ratio {gamma} for {side}x{side} patches")


def _model_side(model: TrainedModel) -> int:
    if model.matrices is None:
        raise ContractError("model carries no seen-matrix set; evaluation needs the training metadata")
    return model.matrices[0].side


# ─── Experiments ──────────────────────────────────────────────────────────────

def eval_seen_unseen(
    model: TrainedModel,
    images: list[EvalImage],
    gammas,
    unseen_seeds,
    sigma: float = 0.0,
    dataset: str = "test",
    seed: int = 0,
    timings: bool = True,
    save_dir: Path | None = None,
    workers: int = WORKERS,
) -> EvalReport:
    """
    Every image under the seen base matrix at each γ and under one fresh FRGM
    per unseen seed: |γ|·|images|·(1 + |seeds|) rows.
    """
    unseen_seeds = list(unseen_seeds)
    if not unseen_seeds:
        raise ConfigError("at least one unseen seed is required")
    clashes = model.seen_seeds & set(unseen_seeds)
    if clashes:
        raise ConfigError(f"unseen seeds {sorted(clashes)} were used in training")
    side = _model_side(model)
    cells: list[Cell] = []
    for gamma in gammas:
        seen = seen_base(model, gamma, side)
        unseen = [gen_frgm(seen.rows, seen.cols, s) for s in unseen_seeds]
        for phi in unseen:
            if any(np.array_equal(phi.data, m.data) for m in model.matrices):
                raise ConfigError(f"unseen matrix {phi.matrix_id} coincides with a training matrix")
        for test in images:
            cells.append(Cell(test, seen, sigma, "coast", True, 0))
            cells += [Cell(test, phi, sigma, "coast", False, 0) for phi in unseen]
    for cell, noise_seed in zip(cells, _noise_seeds(seed, len(cells))):
        cell.noise_seed = noise_seed
    scores = _score(cells, CellRunner(model, timings, save_dir=save_dir), workers)
    return EvalReport("seen-unseen", _per_image_rows(dataset, cells, scores))


def eval_unseen_ratios(
    model: TrainedModel,
    images: list[EvalImage],
    gammas=UNSEEN_RATIOS,
    seed: int = 0,
    dataset: str = "test",
    timings: bool = True,
    save_dir: Path | None = None,
    workers: int = WORKERS,
) -> EvalReport:
    """Reconstruct at ratios the model never trained on, with fresh FRGMs."""
    side = _model_side(model)
    trained = {m.rows for m in model.matrices if m.cols == side * side}
    gammas = list(gammas)
    seeds = _fresh_seeds(seed, len(gammas), model.seen_seeds)
    cells = []
    for gamma, phi_seed in zip(gammas, seeds):
        m = rows_for_ratio(gamma, side * side)
        if m in trained:
            raise ConfigError(f"ratio {gamma} was a training ratio")
        # a training seed would reproduce the leading rows of a seen base
        phi = gen_frgm(m, side * side, phi_seed)
        cells += [Cell(test, phi, 0.0, "coast", False, 0) for test in images]
    scores = _score(cells, CellRunner(model, timings, save_dir=save_dir), workers)
    return EvalReport("unseen-ratio", _per_image_rows(dataset, cells, scores))


def noise_sweep(
    model: TrainedModel,
    images: list[EvalImage],
    sigmas,
    gammas,
    seed: int = 0,
    dataset: str = "test",
    timings: bool = True,
    workers: int = WORKERS,
) -> EvalReport:
    """One row per (σ, γ), averaged over images."""
    if model.sigma_range is None:
        raise ContractError("noise sweep needs the training σ range recorded with the model")
    lo, hi = model.sigma_range
    side = _model_side(model)
    runner = CellRunner(model, timings)
    report = EvalReport("noise-sweep")
    for sigma in sigmas:
        if sigma < 0:
            raise ConfigError(f"noise level must be >= 0, got {sigma}")
        if not lo <= sigma <= hi:
            logger.warning("σ=%.4f lies outside the training range [%.4f, %.4f]", sigma, lo, hi)
        for gamma in gammas:
            phi = seen_base(model, gamma, side)
            cells = [Cell(t, phi, sigma, "coast", True, s) for t, s in zip(images, _noise_seeds(seed, len(images)))]
            report.rows.append(_averaged_row(dataset, phi, True, sigma, "coast", _score(cells, runner, workers)))
    return report


def eval_ns_sweep(
    ns_list,
    gamma: float,
    base: TrainConfig,
    images: list[EvalImage],
    store: PatchStore | None = None,
    unseen_seed: int | None = None,
    dataset: str = "test",
    workers: int = WORKERS,
) -> EvalReport:
    """
    Train one model per N_S (ascending) and score it on the seen base matrix
    at γ, plus an unseen FRGM when `unseen_seed` is given.
    """
    report = EvalReport("ns-sweep")
    for ns in sorted(ns_list):
        if ns < 1:
            raise ConfigError(f"N_S must be >= 1, got {ns}")
        config = replace(base, per_base=ns, run_name=f"{base.run_name or 'ns'}_ns{ns}")
        state = train(config, store=store)
        model = state.model(name=config.run_name)
        runner = CellRunner(model, base.timings)
        phi = seen_base(model, gamma, _model_side(model))
        targets = [(phi, True)]
        if unseen_seed is not None:
            if unseen_seed in model.seen_seeds:
                raise ConfigError(f"unseen seed {unseen_seed} was used in training")
            targets.append((gen_frgm(phi.rows, phi.cols, unseen_seed), False))
        for target, seen in targets:
            cells = [Cell(t, target, 0.0, "coast", seen, 0) for t in images]
            row = _averaged_row(dataset, target, seen, 0.0, f"coast-ns{ns}", _score(cells, runner, workers))
            report.rows.append(row)
    return report


def eval_phase_sweep(
    phase_list,
    gamma: float,
    base: TrainConfig,
    images: list[EvalImage],
    store: PatchStore | None = None,
    dataset: str = "test",
    workers: int = WORKERS,
) -> EvalReport:
    """Train one model per phase count and score each on the seen base matrix at γ."""
    report = EvalReport("phase-sweep")
    for phases in sorted(phase_list):
        config = replace(base, coast=replace(base.coast, phases=phases),
                         run_name=f"{base.run_name or 'phases'}_np{phases}")
        model = train(config, store=store).model(name=config.run_name)
        phi = seen_base(model, gamma, _model_side(model))
        cells = [Cell(t, phi, 0.0, "coast", True, 0) for t in images]
        report.rows.append(_averaged_row(dataset, phi, True, 0.0, f"coast-np{phases}",
                                         _score(cells, CellRunner(model, base.timings), workers)))
    return report


def eval_ablation(
    settings,
    gammas,
    base: TrainConfig,
    images: list[EvalImage],
    store: PatchStore | None = None,
    dataset: str = "test",
    workers: int = WORKERS,
) -> tuple[EvalReport, dict[str, int]]:
    """Train each ablation setting and score it at every γ; also returns parameter counts."""
    report = EvalReport("ablation")
    counts: dict[str, int] = {}
    for key in settings:
        result = ablation_run(key, base, store=store)
        counts[key] = result.parameters
        side = _model_side(result.model)
        runner = CellRunner(result.model, base.timings)
        for gamma in gammas:
            phi = seen_base(result.model, gamma, side)
            cells = [Cell(t, phi, 0.0, "coast", True, 0) for t in images]
            report.rows.append(_averaged_row(dataset, phi, True, 0.0, f"coast-{key}",
                                             _score(cells, runner, workers)))
    return report, counts


def eval_baselines(
    images: list[EvalImage],
    gammas,
    side: int,
    seed: int,
    methods=("ista", "pinv"),
    sigma: float = 0.0,
    ista: IstaConfig | None = None,
    dataset: str = "test",
    timings: bool = True,
    workers: int = WORKERS,
) -> EvalReport:
    """Classical reconstructions of every image under one FRGM per γ."""
    report = EvalReport("baselines")
    runner = CellRunner(None, timings, ista)
    for i, gamma in enumerate(gammas):
        phi = gen_frgm(rows_for_ratio(gamma, side * side), side * side, seed + 1 + i)
        for method in methods:
            if method not in METHODS or method == "coast":
                raise ConfigError(f"unknown baseline method {method!r}")
            cells = [Cell(t, phi, sigma, method, False, s) for t, s in zip(images, _noise_seeds(seed, len(images)))]
            report.rows.extend(_per_image_rows(dataset, cells, _score(cells, runner, workers)))
    return report

