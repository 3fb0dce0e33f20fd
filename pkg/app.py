"""
COAST command line: matrix generation, measurement, training, reconstruction,
evaluation experiments and parameter accounting.

Exit codes: 0 success, 1 usage/configuration, 2 data or file format, 3 numerical failure.
"""
import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from coast.blocks import Image, geometry_for, partition, read_image, to_luminance, write_image
from coast.config import DATABASE_URL, LOG_LEVEL, WORKERS, load_train_config
from coast.errors import (
    ConfigError,
    ContractError,
    DimensionError,
    FormatError,
    NumericalError,
    OrthonormalizationError,
)
from coast.evaluation import (
    METHODS,
    SSIM_WINDOW,
    UNSEEN_RATIOS,
    eval_ablation,
    eval_baselines,
    eval_ns_sweep,
    eval_phase_sweep,
    eval_seen_unseen,
    eval_unseen_ratios,
    load_test_images,
    noise_sweep,
    psnr,
    reconstruct,
    reconstruct_measurement,
    seen_unseen_gap,
    ssim,
)
from coast.formatters import format_error, format_metrics, format_param_counts, format_report
from coast.ista import IstaConfig
from coast.network import CoastConfig, count_params, load_checkpoint
from coast.policy import PolicyViolation, check
from coast.sampling import (
    load_matrix,
    load_measurement,
    matrix_filename,
    measure,
    rows_for_ratio,
    rpa_augment,
    save_matrix,
    save_measurement,
)
from coast.training import TrainedModel, ablation_parameter_counts, build_dataset, load_trained_model, train
from db import init_db

logger = logging.getLogger("coast.cli")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
DATA_ERRORS = (FormatError, DimensionError, ContractError, OSError)


class CliParser(argparse.ArgumentParser):
    """argparse reports usage errors through the policy layer instead of exiting with 2."""

    def error(self, message):
        raise PolicyViolation(f"{self.prog}: {message}")


def exit_code_for(exc: Exception) -> int:
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    if isinstance(exc, (ConfigError, OrthonormalizationError)):
        return EXIT_USAGE
    return EXIT_DATA


def _session(args):
    return init_db(args["db"] or DATABASE_URL)()


# ─── Commands ─────────────────────────────────────────────────────────────────

def cmd_gen_phi(a: dict) -> int:
    n = a["patch_side"] ** 2
    m = rows_for_ratio(a["ratio"], n)
    matrices = rpa_augment([(m, n, int(a["seed"]))], a["count"], master_seed=int(a["seed"]))
    for phi in matrices:
        path = a["out"] / matrix_filename(phi)
        save_matrix(phi, path)
        print(path)
    return EXIT_OK


def cmd_measure(a: dict) -> int:
    phi = load_matrix(a["phi"])
    img = to_luminance(read_image(a["in"]))
    meas = measure(partition(img, phi.side), phi, a["sigma"], seed=a["seed"])
    save_measurement(meas, a["out"])
    print(f"{a['out']}  shape={img.height}x{img.width}  blocks={meas.rows}  M={meas.m}")
    return EXIT_OK


def cmd_train(a: dict) -> int:
    config = load_train_config(a["config"])
    if a.get("seed") is not None:
        config = replace(config, seed=a["seed"])
    state = train(config, session=_session(a))
    print(state.checkpoint)
    return EXIT_OK


def _quantized(pixels: np.ndarray) -> Image:
    return Image(np.round(np.clip(pixels, 0.0, 1.0) * 255.0) / 255.0)


def cmd_reconstruct(a: dict) -> int:
    phi = load_matrix(a["phi"])
    model = None
    if a["method"] == "coast":
        pnpd = not a["no_pnpd"]
        model = TrainedModel(load_checkpoint(a["ckpt"], pnpd=pnpd), pnpd=pnpd, name=Path(a["ckpt"]).stem)
    ista = IstaConfig(lam=a["lam"], max_iters=a["iters"])

    if a.get("measurement"):
        meas = load_measurement(a["measurement"])
        h, w = a["shape"]
        xhat = reconstruct_measurement(meas.y, phi, geometry_for(h, w, phi.side), meas.sigma, a["method"], model, ista)
    else:
        xhat = reconstruct(read_image(a["in"]), phi, a["sigma"], a["method"], model, a["seed"], ista)

    result = _quantized(xhat)
    write_image(result, a["out"])
    print(a["out"])
    if a.get("ref"):
        ref = to_luminance(read_image(a["ref"]))
        score = ssim(ref, result) if min(ref.height, ref.width) >= SSIM_WINDOW else None
        print(format_metrics(psnr(ref, result), score))
    return EXIT_OK


def cmd_count_params(a: dict) -> int:
    mode = a.get("cu") or "shared"
    config = CoastConfig(a["np"], a["nc"], a["c"], cu_shared=mode != "unshared", cu_enabled=mode != "off")
    print(count_params(config))
    if a.get("ablation"):
        print(format_param_counts(ablation_parameter_counts(config)))
    return EXIT_OK


def _finish_report(a: dict, report, session) -> None:
    report.write_csv(a["out"])
    report.store(session)
    print(format_report(report, limit=40))


def _save_dir(a: dict) -> Path | None:
    return a["out"].parent / f"{a['out'].stem}_images" if a.get("save_images") else None


def _model(a: dict, session) -> TrainedModel:
    config = load_train_config(a["config"]) if a.get("config") else None
    return load_trained_model(a["ckpt"], config, session)


def cmd_eval_seen_unseen(a: dict) -> int:
    session = _session(a)
    model = _model(a, session)
    if model.matrices is None:
        raise ContractError("seen-unseen needs the seen matrices; pass --config or record the run in the database")
    gammas = a.get("gammas") or model.matrices.ratios
    report = eval_seen_unseen(
        model, load_test_images(a["images"]), gammas, a["unseen_seeds"], sigma=a["sigma"],
        dataset=a["images"].name, seed=a["seed"] or 0, timings=a["timings"], save_dir=_save_dir(a),
        workers=a["workers"],
    )
    _finish_report(a, report, session)
    for gamma in sorted({r.gamma for r in report.rows}):
        print(f"gamma={gamma:.4f}  seen-unseen gap {seen_unseen_gap(report, gamma):+.3f} dB")
    return EXIT_OK


def cmd_eval_unseen_ratio(a: dict) -> int:
    session = _session(a)
    model = _model(a, session)
    if model.matrices is None:
        raise ContractError("unseen-ratio needs the training ratios; pass --config or record the run in the database")
    report = eval_unseen_ratios(
        model, load_test_images(a["images"]), a.get("gammas") or UNSEEN_RATIOS, seed=a["seed"] or 0,
        dataset=a["images"].name, timings=a["timings"], save_dir=_save_dir(a), workers=a["workers"],
    )
    _finish_report(a, report, session)
    return EXIT_OK


def cmd_eval_noise_sweep(a: dict) -> int:
    session = _session(a)
    model = _model(a, session)
    if model.matrices is None:
        raise ContractError("noise-sweep needs the training metadata; pass --config or record the run in the database")
    report = noise_sweep(
        model, load_test_images(a["images"]), a["sigmas"], a.get("gammas") or model.matrices.ratios,
        seed=a["seed"] or 0, dataset=a["images"].name, timings=a["timings"], workers=a["workers"],
    )
    _finish_report(a, report, session)
    return EXIT_OK


def cmd_eval_baselines(a: dict) -> int:
    session = _session(a)
    report = eval_baselines(
        load_test_images(a["images"]), a["gammas"], a["patch_side"], a["seed"] or 0, methods=a["methods"],
        sigma=a["sigma"], ista=IstaConfig(lam=a["lam"], max_iters=a["iters"]), dataset=a["images"].name,
        timings=a["timings"], workers=a["workers"],
    )
    _finish_report(a, report, session)
    return EXIT_OK


def _base_config(a: dict):
    config = load_train_config(a["config"])
    config = replace(config, timings=a["timings"])
    if a.get("seed") is not None:
        config = replace(config, seed=a["seed"])
    store = build_dataset(config.image_dir, config.patch_count, config.dataset_side, config.seed)
    return config, store


def cmd_eval_ns_sweep(a: dict) -> int:
    session = _session(a)
    config, store = _base_config(a)
    gamma = (a.get("gammas") or [0.3])[0]
    report = eval_ns_sweep(
        a["ns"], gamma, config, load_test_images(a["images"]), store=store,
        unseen_seed=a.get("unseen_seed"), dataset=a["images"].name, workers=a["workers"],
    )
    _finish_report(a, report, session)
    return EXIT_OK


def cmd_eval_phase_sweep(a: dict) -> int:
    session = _session(a)
    config, store = _base_config(a)
    gamma = (a.get("gammas") or [0.3])[0]
    report = eval_phase_sweep(
        a["phases"], gamma, config, load_test_images(a["images"]), store=store,
        dataset=a["images"].name, workers=a["workers"],
    )
    _finish_report(a, report, session)
    return EXIT_OK


def cmd_eval_ablate(a: dict) -> int:
    session = _session(a)
    config, store = _base_config(a)
    report, counts = eval_ablation(
        a["settings"], a.get("gammas") or config.ratios, config, load_test_images(a["images"]),
        store=store, dataset=a["images"].name, workers=a["workers"],
    )
    _finish_report(a, report, session)
    print("parameters:")
    print(format_param_counts(counts))
    return EXIT_OK


COMMAND_MAP = {
    "gen-phi": cmd_gen_phi,
    "measure": cmd_measure,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "count-params": cmd_count_params,
    "eval seen-unseen": cmd_eval_seen_unseen,
    "eval unseen-ratio": cmd_eval_unseen_ratio,
    "eval noise-sweep": cmd_eval_noise_sweep,
    "eval ns-sweep": cmd_eval_ns_sweep,
    "eval phase-sweep": cmd_eval_phase_sweep,
    "eval ablate": cmd_eval_ablate,
    "eval baselines": cmd_eval_baselines,
}


# ─── Parser ───────────────────────────────────────────────────────────────────

def _eval_common(p: argparse.ArgumentParser, needs_ckpt: bool, needs_config: bool = True) -> None:
    if needs_ckpt:
        p.add_argument("--ckpt", help="trained checkpoint")
        p.add_argument("--config", help="training config (rebuilds seen matrices; else read from --db)")
    elif needs_config:
        p.add_argument("--config", help="base training config")
    p.add_argument("--images", help="directory of test images")
    p.add_argument("--out", help="CSV report path")
    p.add_argument("--gammas", help="comma-separated CS ratios")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=WORKERS)
    p.add_argument("--no-timings", dest="timings", action="store_false", help="write 0.0 in the seconds column")


def build_parser() -> argparse.ArgumentParser:
    parser = CliParser(prog="coast", description=__doc__.strip().splitlines()[0])
    parser.add_argument("--log-level", default=None, help=f"logging level (default {LOG_LEVEL})")
    parser.add_argument("--db", default=None, help="SQLAlchemy database URL for run metadata")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("gen-phi", help="generate FRGM sampling matrices")
    p.add_argument("--ratio", type=float)
    p.add_argument("--patch-side", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--count", type=int, default=1, help="N_S: base plus RPA companions")
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("measure", help="block-measure an image into a measurement file")
    p.add_argument("--phi")
    p.add_argument("--in", dest="in")
    p.add_argument("--out")
    p.add_argument("--sigma", default="0", help="noise level, e.g. 0.02 or 10/255")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a network from a key=value config")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")

    p = sub.add_parser("reconstruct", help="reconstruct an image")
    p.add_argument("--method", choices=METHODS, default="coast")
    p.add_argument("--phi")
    p.add_argument("--ckpt")
    p.add_argument("--in", dest="in")
    p.add_argument("--measurement")
    p.add_argument("--shape", help="HxW of the original image (with --measurement)")
    p.add_argument("--out")
    p.add_argument("--ref", help="reference image for PSNR/SSIM")
    p.add_argument("--sigma", default="0")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-pnpd", action="store_true", help="reconstruct patch by patch")
    p.add_argument("--lam", type=float, default=IstaConfig.lam, help="ISTA l1 weight")
    p.add_argument("--iters", type=int, default=IstaConfig.max_iters, help="ISTA iteration cap")

    p = sub.add_parser("count-params", help="learnable parameter count")
    p.add_argument("--np", type=int)
    p.add_argument("--nc", type=int)
    p.add_argument("--c", type=int)
    p.add_argument("--cu", default="shared")
    p.add_argument("--ablation", action="store_true", help="also list the counts of ablation settings a-e")

    ev = sub.add_parser("eval", help="evaluation experiments")
    esub = ev.add_subparsers(dest="experiment", metavar="EXPERIMENT")

    p = esub.add_parser("seen-unseen", help="seen vs unseen sampling matrices")
    _eval_common(p, needs_ckpt=True)
    p.add_argument("--unseen-seeds", help="comma-separated FRGM seeds not used in training")
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--save-images", action="store_true")

    p = esub.add_parser("unseen-ratio", help="CS ratios outside the training set")
    _eval_common(p, needs_ckpt=True)
    p.add_argument("--save-images", action="store_true")

    p = esub.add_parser("noise-sweep", help="PSNR over test noise levels")
    _eval_common(p, needs_ckpt=True)
    p.add_argument("--sigmas", help="comma-separated noise levels, e.g. 0,5/255,10/255")

    p = esub.add_parser("ns-sweep", help="train and score one model per N_S")
    _eval_common(p, needs_ckpt=False)
    p.add_argument("--ns", help="comma-separated N_S values")
    p.add_argument("--unseen-seed", type=int, default=None)

    p = esub.add_parser("phase-sweep", help="train and score one model per phase count")
    _eval_common(p, needs_ckpt=False)
    p.add_argument("--phases", help="comma-separated N_P values")

    p = esub.add_parser("ablate", help="train and score ablation settings a-e")
    _eval_common(p, needs_ckpt=False)
    p.add_argument("--settings", default="a,b,c,d,e")

    p = esub.add_parser("baselines", help="ISTA and pseudo-inverse references, no network")
    _eval_common(p, needs_ckpt=False, needs_config=False)
    p.add_argument("--patch-side", type=int, default=33)
    p.add_argument("--methods", default="ista,pinv")
    p.add_argument("--sigma", default="0")
    p.add_argument("--lam", type=float, default=IstaConfig.lam, help="ISTA l1 weight")
    p.add_argument("--iters", type=int, default=IstaConfig.max_iters, help="ISTA iteration cap")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        level = logging.getLevelName((ns.log_level or LOG_LEVEL).upper())
        if not isinstance(level, int):
            raise PolicyViolation(f"unknown log level {ns.log_level or LOG_LEVEL!r}")
        logging.basicConfig(
            level=level,
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
        if ns.command is None:
            raise PolicyViolation("no command given; see --help")
        command = ns.command
        if command == "eval":
            if ns.experiment is None:
                raise PolicyViolation("eval needs an experiment; see coast eval --help")
            command = f"eval {ns.experiment}"
        args = check(command, vars(ns))
        return COMMAND_MAP[command](args)
    except Exception as e:
        code = exit_code_for(e)
        if code == EXIT_DATA and not isinstance(e, DATA_ERRORS):
            logger.exception("unexpected failure")
        print(format_error(e), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
