"""
Invocation policy layer — validates CLI arguments before any file is touched.
"""
from pathlib import Path

from coast.config import CU_MODES, parse_sigma
from coast.errors import ConfigError, FormatError
from coast.evaluation import METHODS
from coast.sampling import rows_for_ratio
from coast.training import ABLATION_SETTINGS

ABLATION_KEYS = tuple(ABLATION_SETTINGS)
IMAGE_OUTPUTS = (".png", ".pgm")

ALLOWED_COMMANDS = {
    "gen-phi",
    "measure",
    "train",
    "reconstruct",
    "count-params",
    "eval seen-unseen",
    "eval ns-sweep",
    "eval noise-sweep",
    "eval ablate",
    "eval unseen-ratio",
    "eval phase-sweep",
    "eval baselines",
}


class PolicyViolation(ConfigError):
    pass


def _require(args: dict, *names: str) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if args.get(n) in (None, "", [])]
    if missing:
        raise PolicyViolation(f"missing required option(s): {', '.join(missing)}")


def _existing_file(args: dict, name: str) -> Path:
    path = Path(args[name])
    if not path.is_file():
        raise FormatError(f"--{name.replace('_', '-')}: file not found: {path}")
    return path


def _existing_dir(args: dict, name: str) -> Path:
    path = Path(args[name])
    if not path.is_dir():
        raise FormatError(f"--{name.replace('_', '-')}: directory not found: {path}")
    return path


def _ratio(value) -> float:
    r = float(value)
    if not 0.0 < r <= 1.0:
        raise PolicyViolation(f"ratio must lie in (0, 1], got {r}")
    return r


def _positive(name: str, value) -> int:
    if value is None or int(value) < 1:
        raise PolicyViolation(f"--{name} must be >= 1, got {value}")
    return int(value)


def _sigma(value) -> float:
    sigma = parse_sigma(str(value)) if not isinstance(value, float) else value
    if sigma < 0:
        raise PolicyViolation(f"noise level must be >= 0, got {sigma}")
    return sigma


def _float_list(text, name: str) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    try:
        return [parse_sigma(part) if "/" in part else float(part) for part in str(text).split(",") if part.strip()]
    except ValueError:
        raise PolicyViolation(f"--{name}: expected a comma-separated list of numbers, got {text!r}") from None


def _int_list(text, name: str) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    try:
        return [int(part) for part in str(text).split(",") if part.strip()]
    except ValueError:
        raise PolicyViolation(f"--{name}: expected a comma-separated list of integers, got {text!r}") from None


def _image_output(args: dict, name: str = "out") -> Path:
    path = Path(args[name])
    if path.suffix.lower() not in IMAGE_OUTPUTS:
        raise PolicyViolation(f"--{name} must end in .png or .pgm, got {path.name}")
    return path


def _shape(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise PolicyViolation(f"--shape must look like HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise PolicyViolation(f"--shape must be positive, got {text!r}")
    return h, w


def check(command: str, args: dict) -> dict:
    """
    Validate and normalize the arguments of one invocation.
    Returns a new dict; raises PolicyViolation (usage) or FormatError (missing inputs).
    """
    if command not in ALLOWED_COMMANDS:
        raise PolicyViolation(f"unknown command {command!r}")
    args = dict(args)

    if command == "gen-phi":
        _require(args, "ratio", "patch_side", "seed", "out")
        args["ratio"] = _ratio(args["ratio"])
        args["patch_side"] = _positive("patch-side", args["patch_side"])
        args["count"] = _positive("count", args.get("count", 1))
        if int(args["seed"]) < 1:
            raise PolicyViolation("--seed must be >= 1 (0 marks a matrix without a seed)")
        n = args["patch_side"] ** 2
        if rows_for_ratio(args["ratio"], n) < 1:
            raise PolicyViolation(f"ratio {args['ratio']} gives M=0 for {args['patch_side']}x{args['patch_side']} patches")
        args["out"] = Path(args["out"])
        if args["out"].exists() and not args["out"].is_dir():
            raise PolicyViolation(f"--out must be a directory: {args['out']}")

    elif command == "measure":
        _require(args, "phi", "in", "out")
        args["phi"] = _existing_file(args, "phi")
        args["in"] = _existing_file(args, "in")
        args["sigma"] = _sigma(args.get("sigma") or 0.0)
        args["out"] = Path(args["out"])

    elif command == "train":
        _require(args, "config")
        args["config"] = _existing_file(args, "config")

    elif command == "reconstruct":
        _require(args, "method", "phi", "out")
        if args["method"] not in METHODS:
            raise PolicyViolation(f"--method must be one of {', '.join(METHODS)}")
        if bool(args.get("in")) == bool(args.get("measurement")):
            raise PolicyViolation("give exactly one of --in and --measurement")
        if args.get("measurement") and not args.get("shape"):
            raise PolicyViolation("--measurement needs --shape HxW")
        if args["method"] == "coast":
            _require(args, "ckpt")
            args["ckpt"] = _existing_file(args, "ckpt")
        args["phi"] = _existing_file(args, "phi")
        if args.get("in"):
            args["in"] = _existing_file(args, "in")
        else:
            args["measurement"] = _existing_file(args, "measurement")
            args["shape"] = _shape(args["shape"])
        if args.get("ref"):
            args["ref"] = _existing_file(args, "ref")
        args["sigma"] = _sigma(args.get("sigma") or 0.0)
        args["out"] = _image_output(args)

    elif command == "count-params":
        _require(args, "np", "nc", "c")
        for name in ("np", "nc", "c"):
            args[name] = _positive(name, args[name])
        if args.get("cu", "shared") not in CU_MODES:
            raise PolicyViolation(f"--cu must be one of {', '.join(CU_MODES)}")

    else:
        _check_eval(command.split(" ", 1)[1], args)

    return args


def _check_eval(experiment: str, args: dict) -> None:
    _require(args, "images", "out")
    args["images"] = _existing_dir(args, "images")
    args["out"] = Path(args["out"])
    if args["out"].suffix.lower() != ".csv":
        raise PolicyViolation(f"--out must be a .csv file, got {args['out'].name}")
    if args.get("gammas") is not None:
        args["gammas"] = [_ratio(g) for g in _float_list(args["gammas"], "gammas")]

    if experiment == "baselines":
        args["patch_side"] = _positive("patch-side", args.get("patch_side", 33))
        args["sigma"] = _sigma(args.get("sigma") or 0.0)
        methods = [m.strip() for m in str(args.get("methods") or "ista,pinv").split(",") if m.strip()]
        bad = [m for m in methods if m not in METHODS or m == "coast"]
        if bad or not methods:
            raise PolicyViolation(f"--methods takes ista and/or pinv, got {bad or methods}")
        args["methods"] = methods
        if not args.get("gammas"):
            raise PolicyViolation("missing required option(s): --gammas")
    elif experiment in ("seen-unseen", "noise-sweep", "unseen-ratio"):
        _require(args, "ckpt")
        args["ckpt"] = _existing_file(args, "ckpt")
        if args.get("config"):
            args["config"] = _existing_file(args, "config")
    else:
        _require(args, "config")
        args["config"] = _existing_file(args, "config")

    if experiment == "seen-unseen":
        seeds = _int_list(args.get("unseen_seeds") or "", "unseen-seeds")
        if not seeds or min(seeds) < 1:
            raise PolicyViolation("--unseen-seeds needs one or more seeds >= 1")
        args["unseen_seeds"] = seeds
    elif experiment == "noise-sweep":
        _require(args, "sigmas")
        args["sigmas"] = [_sigma(s) for s in _float_list(args["sigmas"], "sigmas")]
    elif experiment == "ns-sweep":
        _require(args, "ns")
        args["ns"] = [_positive("ns", n) for n in _int_list(args["ns"], "ns")]
    elif experiment == "phase-sweep":
        _require(args, "phases")
        args["phases"] = [_positive("phases", n) for n in _int_list(args["phases"], "phases")]
    elif experiment == "ablate":
        keys = [k.strip() for k in str(args.get("settings") or ",".join(ABLATION_KEYS)).split(",") if k.strip()]
        unknown = [k for k in keys if k not in ABLATION_KEYS]
        if unknown:
            raise PolicyViolation(f"unknown ablation setting(s) {unknown}; choose from {', '.join(ABLATION_KEYS)}")
        args["settings"] = keys
