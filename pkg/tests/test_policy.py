from pathlib import Path

import pytest

from coast.errors import ConfigError, FormatError
from coast.policy import ABLATION_KEYS, PolicyViolation, check


@pytest.fixture
def files(tmp_path):
    phi = tmp_path / "phi.bin"
    phi.write_bytes(b"x")
    img = tmp_path / "in.pgm"
    img.write_bytes(b"x")
    ckpt = tmp_path / "m.ckpt"
    ckpt.write_bytes(b"x")
    cfg = tmp_path / "train.cfg"
    cfg.write_text("epochs=1\n")
    return {"phi": str(phi), "in": str(img), "ckpt": str(ckpt), "config": str(cfg), "dir": str(tmp_path)}


def test_unknown_command():
    with pytest.raises(PolicyViolation):
        check("rm -rf", {})


def test_violations_are_config_errors():
    assert issubclass(PolicyViolation, ConfigError)


class TestGenPhi:
    def test_normalizes(self, tmp_path):
        args = check("gen-phi", {"ratio": "0.1", "patch_side": "33", "seed": 5, "out": str(tmp_path / "phis")})
        assert args["ratio"] == 0.1 and args["patch_side"] == 33 and args["count"] == 1
        assert isinstance(args["out"], Path)

    def test_missing_options_listed(self):
        with pytest.raises(PolicyViolation, match="--patch-side"):
            check("gen-phi", {"ratio": 0.1, "seed": 1, "out": "x"})

    @pytest.mark.parametrize("count", [0, -3])
    def test_count_must_be_positive(self, count, tmp_path):
        with pytest.raises(PolicyViolation, match="--count"):
            check("gen-phi", {"ratio": 0.1, "patch_side": 33, "seed": 1, "out": str(tmp_path), "count": count})

    @pytest.mark.parametrize("ratio", [0.0, 1.5, -0.2])
    def test_ratio_range(self, ratio, tmp_path):
        with pytest.raises(PolicyViolation):
            check("gen-phi", {"ratio": ratio, "patch_side": 33, "seed": 1, "out": str(tmp_path)})

    def test_zero_rows(self, tmp_path):
        with pytest.raises(PolicyViolation, match="M=0"):
            check("gen-phi", {"ratio": 0.01, "patch_side": 4, "seed": 1, "out": str(tmp_path / "p")})

    def test_seed_zero_reserved(self, tmp_path):
        with pytest.raises(PolicyViolation):
            check("gen-phi", {"ratio": 0.5, "patch_side": 4, "seed": 0, "out": str(tmp_path)})

    def test_out_must_be_directory(self, files):
        with pytest.raises(PolicyViolation):
            check("gen-phi", {"ratio": 0.5, "patch_side": 4, "seed": 1, "out": files["phi"]})


class TestReconstruct:
    def test_coast_needs_checkpoint(self, files):
        with pytest.raises(PolicyViolation, match="--ckpt"):
            check("reconstruct", {"method": "coast", "phi": files["phi"], "in": files["in"], "out": "o.png"})

    def test_missing_checkpoint_file_is_a_data_error(self, files):
        args = {"method": "coast", "phi": files["phi"], "in": files["in"], "out": "o.png", "ckpt": "nope.ckpt"}
        with pytest.raises(FormatError):
            check("reconstruct", args)

    def test_exactly_one_input(self, files):
        base = {"method": "pinv", "phi": files["phi"], "out": "o.png"}
        with pytest.raises(PolicyViolation):
            check("reconstruct", base)
        with pytest.raises(PolicyViolation):
            check("reconstruct", {**base, "in": files["in"], "measurement": files["in"], "shape": "4x4"})

    def test_measurement_needs_shape(self, files):
        with pytest.raises(PolicyViolation, match="--shape"):
            check("reconstruct", {"method": "pinv", "phi": files["phi"], "measurement": files["in"], "out": "o.png"})

    def test_shape_parsed(self, files):
        args = check("reconstruct", {"method": "pinv", "phi": files["phi"], "measurement": files["in"],
                                     "shape": "7x10", "out": "o.pgm"})
        assert args["shape"] == (7, 10)

    def test_sigma_fraction(self, files):
        args = check("reconstruct", {"method": "ista", "phi": files["phi"], "in": files["in"],
                                     "out": "o.png", "sigma": "10/255"})
        assert args["sigma"] == pytest.approx(10 / 255)

    def test_output_suffix(self, files):
        with pytest.raises(PolicyViolation):
            check("reconstruct", {"method": "pinv", "phi": files["phi"], "in": files["in"], "out": "o.jpg"})

    def test_unknown_method(self, files):
        with pytest.raises(PolicyViolation):
            check("reconstruct", {"method": "tv", "phi": files["phi"], "in": files["in"], "out": "o.png"})


class TestCountParams:
    def test_positive(self):
        with pytest.raises(PolicyViolation):
            check("count-params", {"np": 0, "nc": 3, "c": 32})

    def test_cu_mode(self):
        with pytest.raises(PolicyViolation):
            check("count-params", {"np": 20, "nc": 3, "c": 32, "cu": "sometimes"})


class TestEval:
    def test_seen_unseen(self, files):
        args = check("eval seen-unseen", {"images": files["dir"], "out": "r.csv", "ckpt": files["ckpt"],
                                          "gammas": "0.1,0.3", "unseen_seeds": "11,12"})
        assert args["gammas"] == [0.1, 0.3] and args["unseen_seeds"] == [11, 12]

    def test_seen_unseen_needs_seeds(self, files):
        with pytest.raises(PolicyViolation):
            check("eval seen-unseen", {"images": files["dir"], "out": "r.csv", "ckpt": files["ckpt"]})

    def test_out_must_be_csv(self, files):
        with pytest.raises(PolicyViolation):
            check("eval ablate", {"images": files["dir"], "out": "r.txt", "config": files["config"]})

    def test_missing_image_dir(self, files):
        with pytest.raises(FormatError):
            check("eval ablate", {"images": "/no/such/dir", "out": "r.csv", "config": files["config"]})

    def test_training_experiments_need_config(self, files):
        with pytest.raises(PolicyViolation, match="--config"):
            check("eval ns-sweep", {"images": files["dir"], "out": "r.csv", "ns": "1,5"})

    def test_noise_sigmas(self, files):
        args = check("eval noise-sweep", {"images": files["dir"], "out": "r.csv", "ckpt": files["ckpt"],
                                          "sigmas": "0,10/255,0.1"})
        assert args["sigmas"] == pytest.approx([0.0, 10 / 255, 0.1])

    def test_ablation_defaults_to_every_setting(self, files):
        args = check("eval ablate", {"images": files["dir"], "out": "r.csv", "config": files["config"]})
        assert args["settings"] == list(ABLATION_KEYS)

    def test_unknown_ablation_setting(self, files):
        with pytest.raises(PolicyViolation):
            check("eval ablate", {"images": files["dir"], "out": "r.csv", "config": files["config"], "settings": "a,q"})

    def test_bad_integer_list(self, files):
        with pytest.raises(PolicyViolation):
            check("eval phase-sweep", {"images": files["dir"], "out": "r.csv", "config": files["config"],
                                       "phases": "1,two"})

    def test_baselines_defaults(self, files):
        args = check("eval baselines", {"images": files["dir"], "out": "r.csv", "gammas": "0.1,0.5"})
        assert args["methods"] == ["ista", "pinv"]
        assert args["patch_side"] == 33
        assert args["sigma"] == 0.0

    def test_baselines_need_gammas(self, files):
        with pytest.raises(PolicyViolation, match="--gammas"):
            check("eval baselines", {"images": files["dir"], "out": "r.csv"})

    @pytest.mark.parametrize("methods", ["coast", "pinv,fista", ","])
    def test_baselines_methods(self, files, methods):
        with pytest.raises(PolicyViolation):
            check("eval baselines", {"images": files["dir"], "out": "r.csv", "gammas": "0.5", "methods": methods})
