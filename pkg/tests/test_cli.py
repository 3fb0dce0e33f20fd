import numpy as np
import pytest

from app import EXIT_DATA, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, exit_code_for, main
from coast.blocks import Image, read_image, write_image
from coast.errors import ConfigError, FormatError, NumericalError
from coast.network import CoastConfig, init_params, save_checkpoint
from coast.sampling import gen_frgm, load_matrix, save_matrix
from conftest import smooth_image


@pytest.fixture
def square_phi(tmp_path):
    path = tmp_path / "phi_16x16_3.bin"
    save_matrix(gen_frgm(16, 16, 3), path)
    return path


@pytest.fixture
def half_phi(tmp_path):
    path = tmp_path / "phi_8x16_2.bin"
    save_matrix(gen_frgm(8, 16, 2), path)
    return path


@pytest.fixture
def picture(tmp_path, rng):
    path = tmp_path / "pic.pgm"
    write_image(Image(smooth_image(rng, 12, 12)), path)
    return path


@pytest.fixture
def ckpt(tmp_path):
    path = tmp_path / "net.ckpt"
    save_checkpoint(init_params(CoastConfig(phases=2, blocks=1, channels=4), seed=5), path)
    return path


def test_exit_codes():
    assert exit_code_for(NumericalError("nan")) == EXIT_NUMERICAL
    assert exit_code_for(ConfigError("bad")) == EXIT_USAGE
    assert exit_code_for(FormatError("bad")) == EXIT_DATA


# ─── Usage ────────────────────────────────────────────────────────────────────

class TestUsage:
    def test_no_command(self, capsys):
        assert main([]) == EXIT_USAGE
        assert capsys.readouterr().err.startswith("Error:")

    def test_unknown_flag(self):
        assert main(["count-params", "--bogus", "1"]) == EXIT_USAGE

    def test_eval_needs_experiment(self):
        assert main(["eval"]) == EXIT_USAGE

    def test_bad_log_level(self):
        assert main(["--log-level", "chatty", "count-params", "--np", "1", "--nc", "1", "--c", "1"]) == EXIT_USAGE

    def test_missing_required_flag(self, capsys):
        assert main(["gen-phi", "--ratio", "0.1", "--seed", "1", "--out", "x"]) == EXIT_USAGE
        assert "--patch-side" in capsys.readouterr().err

    def test_usage_error_leaves_existing_output_alone(self, tmp_path, square_phi, picture):
        out = tmp_path / "keep.png"
        out.write_bytes(b"previous")
        code = main(["reconstruct", "--method", "coast", "--phi", str(square_phi), "--in", str(picture),
                     "--out", str(out)])
        assert code == EXIT_USAGE
        assert out.read_bytes() == b"previous"


# ─── gen-phi / count-params ───────────────────────────────────────────────────

class TestGenPhi:
    @pytest.mark.parametrize("ratio, rows", [(0.1, 109), (0.5, 545)])
    def test_full_scale_sizes(self, tmp_path, ratio, rows):
        assert main(["gen-phi", "--ratio", str(ratio), "--patch-side", "33", "--seed", "7",
                     "--out", str(tmp_path)]) == EXIT_OK
        phi = load_matrix(tmp_path / f"phi_{rows}x1089_7.bin")
        assert phi.data.shape == (rows, 1089)
        assert phi.orthonormality_error() < 1e-10

    def test_square(self, tmp_path):
        assert main(["gen-phi", "--ratio", "1.0", "--patch-side", "4", "--seed", "2", "--out", str(tmp_path)]) == 0
        phi = load_matrix(tmp_path / "phi_16x16_2.bin")
        np.testing.assert_allclose(phi.data @ phi.data.T, np.eye(16), atol=1e-12)

    def test_rpa_companions(self, tmp_path, capsys):
        assert main(["gen-phi", "--ratio", "0.5", "--patch-side", "4", "--seed", "2", "--count", "3",
                     "--out", str(tmp_path / "set")]) == EXIT_OK
        assert len(list((tmp_path / "set").glob("phi_8x16_*.bin"))) == 3
        assert len(capsys.readouterr().out.splitlines()) == 3

    def test_zero_count_is_a_usage_error(self, tmp_path):
        out = tmp_path / "never"
        code = main(["gen-phi", "--ratio", "0.5", "--patch-side", "4", "--seed", "1", "--count", "0", "--out", str(out)])
        assert code == EXIT_USAGE
        assert not out.exists()

    def test_zero_rows_creates_nothing(self, tmp_path):
        out = tmp_path / "never"
        assert main(["gen-phi", "--ratio", "0.01", "--patch-side", "4", "--seed", "1", "--out", str(out)]) == 1
        assert not out.exists()


@pytest.mark.parametrize(
    "cu, expected", [("shared", "1122056"), ("unshared", "1127720"), ("off", "1121960")]
)
def test_count_params(capsys, cu, expected):
    assert main(["count-params", "--np", "20", "--nc", "3", "--c", "32", "--cu", cu]) == EXIT_OK
    assert capsys.readouterr().out.strip() == expected


def test_count_params_ablation(capsys):
    assert main(["count-params", "--np", "20", "--nc", "3", "--c", "32", "--ablation"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "(a) 1,121,960" in out
    assert "(c) 1,127,720" in out
    assert "(d) 1,122,056" in out
    assert "(e) 1,122,056" in out


# ─── measure / reconstruct ────────────────────────────────────────────────────

class TestReconstruct:
    def test_square_pinv_is_lossless(self, tmp_path, square_phi, picture, capsys):
        out = tmp_path / "rec.png"
        code = main(["reconstruct", "--method", "pinv", "--phi", str(square_phi), "--in", str(picture),
                     "--out", str(out), "--ref", str(picture)])
        assert code == EXIT_OK
        assert "PSNR 99.00 dB" in capsys.readouterr().out
        np.testing.assert_array_equal(read_image(out).pixels, read_image(picture).pixels)

    def test_measure_then_reconstruct(self, tmp_path, square_phi, picture, capsys):
        y = tmp_path / "y.bin"
        assert main(["measure", "--phi", str(square_phi), "--in", str(picture), "--out", str(y)]) == EXIT_OK
        out = tmp_path / "rec.pgm"
        assert main(["reconstruct", "--method", "pinv", "--phi", str(square_phi), "--measurement", str(y),
                     "--shape", "12x12", "--out", str(out), "--ref", str(picture)]) == EXIT_OK
        assert "PSNR 99.00 dB" in capsys.readouterr().out

    def test_wrong_shape_for_measurement(self, tmp_path, square_phi, picture):
        y = tmp_path / "y.bin"
        main(["measure", "--phi", str(square_phi), "--in", str(picture), "--out", str(y)])
        code = main(["reconstruct", "--method", "pinv", "--phi", str(square_phi), "--measurement", str(y),
                     "--shape", "20x20", "--out", str(tmp_path / "r.png")])
        assert code == EXIT_DATA

    def test_ista(self, tmp_path, half_phi, picture, capsys):
        out = tmp_path / "ista.png"
        code = main(["reconstruct", "--method", "ista", "--phi", str(half_phi), "--in", str(picture),
                     "--out", str(out), "--ref", str(picture), "--iters", "50"])
        assert code == EXIT_OK
        assert "SSIM" in capsys.readouterr().out

    def test_coast(self, tmp_path, half_phi, picture, ckpt):
        out = tmp_path / "coast.png"
        code = main(["reconstruct", "--method", "coast", "--ckpt", str(ckpt), "--phi", str(half_phi),
                     "--in", str(picture), "--out", str(out), "--sigma", "5/255", "--seed", "3"])
        assert code == EXIT_OK
        assert read_image(out).pixels.shape == (12, 12)

    def test_deblocking_flag_is_a_no_op_on_one_block(self, tmp_path, half_phi, ckpt, rng):
        single = tmp_path / "single.pgm"
        write_image(Image(smooth_image(rng, 4, 4)), single)
        outs = []
        for flags in ([], ["--no-pnpd"]):
            out = tmp_path / f"o{len(outs)}.png"
            assert main(["reconstruct", "--method", "coast", "--ckpt", str(ckpt), "--phi", str(half_phi),
                         "--in", str(single), "--out", str(out), *flags]) == EXIT_OK
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_missing_checkpoint_file(self, tmp_path, half_phi, picture):
        code = main(["reconstruct", "--method", "coast", "--ckpt", str(tmp_path / "gone.ckpt"),
                     "--phi", str(half_phi), "--in", str(picture), "--out", str(tmp_path / "r.png")])
        assert code == EXIT_DATA

    def test_corrupt_matrix(self, tmp_path, picture):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"COASTPHI" + b"\x01" * 5)
        code = main(["reconstruct", "--method", "pinv", "--phi", str(bad), "--in", str(picture),
                     "--out", str(tmp_path / "r.png")])
        assert code == EXIT_DATA


# ─── train / eval ─────────────────────────────────────────────────────────────

@pytest.fixture
def train_cfg(tmp_path, image_dir):
    path = tmp_path / "tiny.cfg"
    path.write_text(
        "# tiny network for the CLI tests\n"
        f"image_dir={image_dir}\n"
        "patch_count=16\npatch_side=4\nbatch_size=8\nepochs=1\nlearning_rate=1e-3\nseed=7\n"
        "ratios=0.25,0.5\nper_base=2\nphases=2\nblocks=1\nchannels=4\n"
        f"out_dir={tmp_path / 'runs'}\ntimings=off\nrun_name=cli\n"
    )
    return path


class TestTrainAndEval:
    def test_train_then_seen_unseen_from_database(self, tmp_path, train_cfg, test_images_dir, capsys):
        db = f"sqlite:///{tmp_path / 'coast.db'}"
        assert main(["--db", db, "train", "--config", str(train_cfg)]) == EXIT_OK
        ckpt = tmp_path / "runs" / "cli" / "final.ckpt"
        assert ckpt.exists()
        assert str(ckpt) in capsys.readouterr().out

        report = tmp_path / "su.csv"
        code = main(["--db", db, "eval", "seen-unseen", "--ckpt", str(ckpt), "--images", str(test_images_dir),
                     "--out", str(report), "--unseen-seeds", "101", "--no-timings"])
        assert code == EXIT_OK
        lines = report.read_text().splitlines()
        assert lines[0] == "dataset,matrix_id,seen,gamma,sigma,method,psnr_db,ssim,seconds"
        assert len(lines) == 1 + 2 * 2 * 2
        assert all(line.endswith(",0.000") for line in lines[1:])
        assert "seen-unseen gap" in capsys.readouterr().out

    def test_eval_without_metadata(self, tmp_path, test_images_dir, ckpt):
        code = main(["--db", f"sqlite:///{tmp_path / 'empty.db'}", "eval", "seen-unseen", "--ckpt", str(ckpt),
                     "--images", str(test_images_dir), "--out", str(tmp_path / "r.csv"), "--unseen-seeds", "5"])
        assert code == EXIT_DATA
        assert not (tmp_path / "r.csv").exists()

    def test_noise_sweep_with_config(self, tmp_path, train_cfg, test_images_dir):
        db = f"sqlite:///{tmp_path / 'coast.db'}"
        assert main(["--db", db, "train", "--config", str(train_cfg)]) == EXIT_OK
        report = tmp_path / "noise.csv"
        code = main(["--db", db, "eval", "noise-sweep", "--ckpt", str(tmp_path / "runs" / "cli" / "final.ckpt"),
                     "--config", str(train_cfg), "--images", str(test_images_dir), "--out", str(report),
                     "--sigmas", "0,10/255", "--gammas", "0.25"])
        assert code == EXIT_OK
        assert len(report.read_text().splitlines()) == 3

    def test_ablate(self, tmp_path, train_cfg, test_images_dir, capsys):
        report = tmp_path / "ablate.csv"
        code = main(["--db", f"sqlite:///{tmp_path / 'coast.db'}", "eval", "ablate", "--config", str(train_cfg),
                     "--images", str(test_images_dir), "--out", str(report), "--settings", "a,d",
                     "--gammas", "0.25", "--no-timings"])
        assert code == EXIT_OK
        assert [line.split(",")[5] for line in report.read_text().splitlines()[1:]] == ["coast-a", "coast-d"]
        assert "(d)" in capsys.readouterr().out

    def test_baselines_need_no_model(self, tmp_path, test_images_dir):
        report = tmp_path / "base.csv"
        code = main(["--db", f"sqlite:///{tmp_path / 'coast.db'}", "eval", "baselines",
                     "--images", str(test_images_dir), "--out", str(report), "--patch-side", "4",
                     "--gammas", "0.5", "--iters", "20", "--no-timings"])
        assert code == EXIT_OK
        lines = report.read_text().splitlines()
        assert len(lines) == 1 + 2 * 2
        assert {line.split(",")[5] for line in lines[1:]} == {"ista", "pinv"}

    def test_baselines_reject_coast(self, tmp_path, test_images_dir):
        code = main(["eval", "baselines", "--images", str(test_images_dir), "--out", str(tmp_path / "b.csv"),
                     "--gammas", "0.5", "--methods", "pinv,coast"])
        assert code == EXIT_USAGE
        assert not (tmp_path / "b.csv").exists()
