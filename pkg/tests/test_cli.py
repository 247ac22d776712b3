import os
import re
import subprocess
import sys

import numpy as np
import pytest

from sgen.cli import main
from sgen.config import RunConfig, build_run_config, parse_config_file
from sgen.data import read_netpbm, synth_face, write_netpbm
from sgen.errors import ConfigError
from sgen.model import SgenConfig, load_checkpoint, init_params

TINY_KEYS = {"levels": 2, "base_channels": 2, "steps": 2, "batch_size": 2,
             "mse_only": True, "scales": "32x32", "synthetic": 4,
             "val_images": 2, "val_every": 0, "seed": 3}


def write_config(path, **extra):
    merged = dict(TINY_KEYS, **extra)
    lines = [f"{k} = {str(v).lower() if isinstance(v, bool) else v}" for k, v in merged.items()]
    path.write_text("\n".join(lines) + "\n")
    return str(path)


# ---------------------------------------------------------------------------
# config files


def test_parse_config_file_values(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nlevels = 2\n\nsigma = 12.5  # inline\nmse_only = true\n"
                    "scales = 32x32\n")
    values = parse_config_file(path)
    assert values == {"levels": 2, "sigma": 12.5, "mse_only": True, "scales": "32x32"}


def test_parse_config_unknown_key_names_line(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("levels = 2\nwidth = 8\n")
    with pytest.raises(ConfigError, match=r"run\.cfg:2.*width"):
        parse_config_file(path)


def test_parse_config_duplicate_key(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 1\nseed = 2\n")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config_file(path)


def test_parse_config_bad_value_type(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("steps = soon\n")
    with pytest.raises(ConfigError, match="int"):
        parse_config_file(path)
    path.write_text("mse_only = maybe\n")
    with pytest.raises(ConfigError, match="true/false"):
        parse_config_file(path)


def test_parse_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        parse_config_file(tmp_path / "absent.cfg")


def test_parse_config_requires_equals(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("levels 2\n")
    with pytest.raises(ConfigError, match="key = value"):
        parse_config_file(path)


def test_build_run_config_precedence(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("steps = 7\nseed = 1\n")
    run = build_run_config(path, {"seed": 9})
    assert run.steps == 7 and run.seed == 9
    assert build_run_config(None, None) == RunConfig()
    with pytest.raises(ConfigError, match="unknown"):
        build_run_config(None, {"depth": 3})


def test_scale_list_parsing():
    run = RunConfig(scales="48x32, 64x48")
    assert run.scale_list() == [(48, 32), (64, 48)]
    with pytest.raises(ConfigError, match="48x32"):
        RunConfig(scales="48by32").scale_list()
    with pytest.raises(ConfigError, match="multiples of 16"):
        RunConfig(scales="50x32").scale_list()


# ---------------------------------------------------------------------------
# shared trained run


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "run.cfg")
    out = root / "run_out"
    assert main(["train", "--config", cfg, "--out", str(out)]) == 0
    return {"cfg": cfg, "out": out, "ckpt": out / "sgen.ckpt", "root": root}


def test_train_writes_artifacts(trained):
    assert trained["ckpt"].is_file()
    lines = (trained["out"] / "loss_log.csv").read_text().strip().split("\n")
    assert lines[0] == "step,d_loss,g_adv,g_mse,val_psnr"
    assert len(lines) == 3
    assert read_netpbm(trained["out"] / "grid_final.ppm").ndim == 3


def test_train_zero_steps_checkpoint_is_initialization(tmp_path):
    cfg = write_config(tmp_path / "run.cfg", steps=0)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    params, mcfg = load_checkpoint(tmp_path / "o" / "sgen.ckpt")
    fresh = init_params(SgenConfig(levels=2, base_channels=2, seed=3), seed=3)
    assert params.keys() == fresh.keys()
    for k in fresh:
        assert np.array_equal(params[k].data, fresh[k].data), k


def test_train_without_data_exits_2(tmp_path, capsys):
    assert main(["train", "--steps", "1", "--out", str(tmp_path)]) == 2
    assert "'corpus'" in capsys.readouterr().err


def test_train_rejects_bad_scales(tmp_path, capsys):
    cfg = write_config(tmp_path / "run.cfg", scales="50x32")
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "multiples" in capsys.readouterr().err


def test_adversarial_scale_guard(tmp_path, capsys):
    cfg = write_config(tmp_path / "run.cfg", scales="8x8", mse_only=False)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "discriminator minimum" in capsys.readouterr().err


def test_eval_writes_metrics_and_is_deterministic(trained, capsys):
    args = ["eval", "--config", trained["cfg"], "--checkpoint", str(trained["ckpt"])]
    out1 = trained["root"] / "eval1"
    out2 = trained["root"] / "eval2"
    assert main(args + ["--out", str(out1)]) == 0
    text = capsys.readouterr().out
    assert "scale,psnr,ssim,n" in text
    assert main(args + ["--out", str(out2)]) == 0
    csv1 = (out1 / "metrics.csv").read_text()
    assert csv1 == (out2 / "metrics.csv").read_text()
    lines = csv1.strip().split("\n")
    assert lines[1].startswith("32x32,")
    assert lines[-1].startswith("all,")


def test_restore_pads_odd_sizes(trained, tmp_path):
    src = tmp_path / "in.pgm"
    write_netpbm(synth_face(0, 50, 34), src)
    dst = tmp_path / "out.pgm"
    assert main(["restore", "--checkpoint", str(trained["ckpt"]),
                 str(src), str(dst)]) == 0
    assert read_netpbm(dst).shape == (50, 34)


def test_restore_missing_checkpoint_exits_2(tmp_path, capsys):
    src = tmp_path / "in.pgm"
    write_netpbm(synth_face(0, 32, 32), src)
    assert main(["restore", "--checkpoint", str(tmp_path / "no.ckpt"),
                 str(src), str(tmp_path / "out.pgm")]) == 2
    assert "error" in capsys.readouterr().err


def test_degrade_identity_settings(tmp_path):
    src = tmp_path / "in.pgm"
    raster = synth_face(5, 32, 32)
    write_netpbm(raster, src)
    dst = tmp_path / "out.pgm"
    assert main(["degrade", "--noise", "none", "--factor", "1",
                 str(src), str(dst)]) == 0
    assert np.array_equal(read_netpbm(dst), raster)


def test_degrade_sigma_flag_controls_noise(tmp_path):
    src = tmp_path / "flat.pgm"
    write_netpbm(np.full((64, 64), 128, dtype=np.uint8), src)
    dst = tmp_path / "noisy.pgm"
    assert main(["degrade", "--noise", "gaussian", "--sigma", "20",
                 "--factor", "1", str(src), str(dst)]) == 0
    noise = read_netpbm(dst).astype(np.float64) - 128.0
    assert 18.5 <= noise.std() <= 21.5


def test_degrade_rejects_bad_factor(tmp_path, capsys):
    src = tmp_path / "in.pgm"
    write_netpbm(synth_face(0, 32, 32), src)
    assert main(["degrade", "--factor", "0", str(src), str(tmp_path / "o.pgm")]) == 2
    assert "down_factor" in capsys.readouterr().err


def test_gates_dumps_maps_and_stats(trained, tmp_path, capsys):
    src = tmp_path / "in.pgm"
    write_netpbm(synth_face(1, 32, 32), src)
    out = tmp_path / "gates"
    assert main(["gates", "--checkpoint", str(trained["ckpt"]),
                 "--out", str(out), str(src)]) == 0
    text = capsys.readouterr().out
    assert re.search(r"dec\.sgu2: mean\(ga \+ gp\) = \d+\.\d{4}", text)
    assert re.search(r"enc\.sgu2: mean\(ga \+ gp\) = \d+\.\d{4}", text)
    names = sorted(p.name for p in out.glob("*.pgm"))
    # enc junction: 2 gates x 4 bottleneck channels; dec junction: 2 gates x 2
    assert len(names) == 12
    assert "enc_sgu2_ga_ch00.pgm" in names
    assert "dec_sgu2_gp_ch01.pgm" in names


def test_ablate_compares_variants(tmp_path, capsys):
    cfg = write_config(tmp_path / "run.cfg", val_images=2)
    out = tmp_path / "ab"
    assert main(["ablate", "--config", cfg, "--out", str(out),
                 "--noise-sweep", "20"]) == 0
    lines = (out / "ablation.csv").read_text().strip().split("\n")
    assert lines[0] == "variant,scale,psnr,ssim,n"
    variants = {line.split(",")[0] for line in lines[1:]}
    assert variants == {"sgu", "max", "avg", "concat", "sgu_adv", "sgu@sigma20"}
    assert len(lines) == 1 + 6 * 2  # per-scale row + all row for each variant
    for comb in ("sgu", "max", "avg", "concat", "sgu_adv"):
        assert (out / f"ablate_{comb}" / "sgen.ckpt").is_file()


def test_bad_noise_sweep_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path / "run.cfg")
    assert main(["ablate", "--config", cfg, "--out", str(tmp_path / "o"),
                 "--noise-sweep", "low,high"]) == 2
    assert "noise-sweep" in capsys.readouterr().err


def test_invalid_sgen_threads_exits_2(monkeypatch, capsys):
    monkeypatch.setenv("SGEN_THREADS", "zero")
    assert main(["train", "--steps", "0"]) == 2
    assert "SGEN_THREADS" in capsys.readouterr().err


def test_module_invocation_subprocess(tmp_path):
    cfg = write_config(tmp_path / "run.cfg", steps=1)
    out = tmp_path / "o"
    env = dict(os.environ, SGEN_THREADS="1")
    proc = subprocess.run(
        [sys.executable, "-m", "sgen", "train", "--config", cfg, "--out", str(out)],
        capture_output=True, text=True, env=env, timeout=300)
    assert proc.returncode == 0, proc.stderr
    assert "wrote checkpoint" in proc.stdout
    assert (out / "sgen.ckpt").is_file()
