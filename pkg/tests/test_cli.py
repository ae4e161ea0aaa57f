"""Command line behavior: determinism, resume, exit codes, image output."""
import os

import numpy as np
import pytest

from gatereid.cli import main, resolve_config
from gatereid.network import NetworkConfig, init_network_params
from gatereid.checkpoint import save_checkpoint
from gatereid.training import ChannelStats

SMALL_CFG = """\
height = 32
width = 16
conv1_out = 4
conv1_of_out = 4
gate_hidden = 6
state_dim = 12
feature_dim = 12
conv2_out = 6
conv3_out = 8
kernel_size = 3
num_identities = 4
min_frames = 8
max_frames = 12
crop_height = 28
crop_width = 12
subseq_len = 6
pos_pairs_per_batch = 2
neg_pairs_per_batch = 2
epochs = 2
"""


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL_CFG)
    return str(path)


def run(*argv):
    return main(list(argv))


def dir_bytes(root):
    out = {}
    for base, _, names in os.walk(root):
        for name in names:
            path = os.path.join(base, name)
            out[os.path.relpath(path, root)] = open(path, "rb").read()
    return out


# ---------------------------------------------------------------------------
# config resolution

def test_resolution_priority(tmp_path, cfg_file):
    env = {"GATEREID_OUT_DIR": "from_env", "GATEREID_THREADS": "3"}
    cfg = resolve_config(cfg_file, ["epochs=9"], env=env)
    assert cfg.run.out_dir == "from_env"     # env beats default
    assert cfg.run.threads == 3
    assert cfg.training.epochs == 9          # --set beats the file value 2
    assert cfg.network.height == 32

    cfg = resolve_config(cfg_file, ["out_dir=cli_wins"], env=env)
    assert cfg.run.out_dir == "cli_wins"


def test_bad_values_rejected(cfg_file):
    from gatereid.cli import ConfigError
    with pytest.raises(ConfigError):
        resolve_config(cfg_file, ["epochs=soon"])
    with pytest.raises(ConfigError):
        resolve_config(cfg_file, ["use_prev_state=maybe"])
    with pytest.raises(ConfigError):
        resolve_config(cfg_file, ["train_fraction=1.5"])


def test_exit_codes(tmp_path, cfg_file, capsys):
    assert run("generate", "--config", cfg_file, "--set", "bogus=1") == 1
    assert run("generate", "--config", str(tmp_path / "missing.cfg")) == 1
    assert run("eval", "--config", cfg_file, "--checkpoint", str(tmp_path / "none")) == 1
    assert run("definitely-not-a-command") == 1
    capsys.readouterr()


# ---------------------------------------------------------------------------
# generate

def test_generate_deterministic_and_counted(tmp_path, cfg_file, capsys):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert run("generate", "--config", cfg_file, "--set", f"out_dir={a}") == 0
    assert run("generate", "--config", cfg_file, "--set", f"out_dir={b}") == 0
    capsys.readouterr()
    da, db = dir_bytes(os.path.join(a, "dataset")), dir_bytes(os.path.join(b, "dataset"))
    assert da.keys() == db.keys()
    assert all(da[k] == db[k] for k in da)
    # 4 identities x 2 cameras
    dirs = [d for d in os.listdir(os.path.join(a, "dataset")) if d.startswith("id")]
    assert len(dirs) == 8
    assert os.path.isfile(os.path.join(a, "resolved_config.txt"))


# ---------------------------------------------------------------------------
# train / eval / resume

@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = root / "small.cfg"
    cfg.write_text(SMALL_CFG)
    out = str(root / "out")
    assert main(["generate", "--config", str(cfg), "--set", f"out_dir={out}"]) == 0
    assert main(["train", "--config", str(cfg), "--set", f"out_dir={out}"]) == 0
    return str(cfg), out


def test_train_writes_artifacts(trained):
    _, out = trained
    assert os.path.isfile(os.path.join(out, "training_log.tsv"))
    assert os.path.isfile(os.path.join(out, "checkpoint", "manifest.txt"))
    text = open(os.path.join(out, "resolved_config.txt")).read()
    assert "command = train" in text
    assert "fusion_mode = f4" in text  # the default fusion


def test_eval_writes_cmc_table(trained, capsys):
    cfg, out = trained
    assert main(["eval", "--config", cfg, "--set", f"out_dir={out}",
                 "--checkpoint", os.path.join(out, "checkpoint")]) == 0
    printed = capsys.readouterr().out
    assert printed.startswith("rank\tmatch_pct")
    assert open(os.path.join(out, "cmc.txt")).read() == printed


def test_eval_repeats_average(trained, capsys):
    cfg, out = trained
    ckpt = os.path.join(out, "checkpoint")
    singles = []
    for r in range(2):
        assert main(["eval", "--config", cfg, "--set", f"out_dir={out}",
                     "--set", f"split_seed={r}", "--checkpoint", ckpt]) == 0
        first = capsys.readouterr().out.strip().splitlines()[1]
        singles.append(float(first.split("\t")[1]))
    assert main(["eval", "--config", cfg, "--set", f"out_dir={out}",
                 "--repeats", "2", "--checkpoint", ckpt]) == 0
    combined = float(capsys.readouterr().out.strip().splitlines()[1].split("\t")[1])
    assert combined == pytest.approx(np.mean(singles), abs=0.005)


def test_resume_matches_straight_run(trained, tmp_path, capsys):
    cfg, out = trained
    data = os.path.join(out, "dataset")
    resumed = str(tmp_path / "resumed")
    straight = str(tmp_path / "straight")
    assert main(["train", "--config", cfg, "--set", f"out_dir={resumed}",
                 "--set", f"data_dir={data}", "--set", "epochs=4",
                 "--resume", os.path.join(out, "checkpoint")]) == 0
    assert main(["train", "--config", cfg, "--set", f"out_dir={straight}",
                 "--set", f"data_dir={data}", "--set", "epochs=4"]) == 0
    capsys.readouterr()
    ra = dir_bytes(os.path.join(resumed, "checkpoint"))
    rb = dir_bytes(os.path.join(straight, "checkpoint"))
    assert ra.keys() == rb.keys()
    mismatched = [k for k in ra if ra[k] != rb[k]]
    assert mismatched == []


def test_resume_rejects_architecture_change(trained, tmp_path, capsys):
    cfg, out = trained
    rc = main(["train", "--config", cfg, "--set", f"out_dir={tmp_path / 'x'}",
               "--set", f"data_dir={os.path.join(out, 'dataset')}",
               "--set", "state_dim=16", "--set", "feature_dim=16",
               "--resume", os.path.join(out, "checkpoint")])
    assert rc == 1
    capsys.readouterr()


# ---------------------------------------------------------------------------
# gate images

def _stub_checkpoint(tmp_path, name, fusion_mode, zero=False):
    net = NetworkConfig(height=32, width=16, conv1_out=4, conv1_of_out=4,
                        gate_hidden=6, state_dim=12, feature_dim=12,
                        conv2_out=6, conv3_out=8, kernel_size=3,
                        fusion_mode=fusion_mode)
    params = init_network_params(net, (28, 12), np.random.default_rng(2))
    if zero:
        for pname in params.names():
            params[pname].data[...] = 0.0
    stats = ChannelStats(np.zeros(5), np.ones(5))
    path = str(tmp_path / name)
    save_checkpoint(path, params, stats=stats)
    return path


def test_gate_images_mid_gray_for_zero_parameters(tmp_path, cfg_file, capsys):
    out = str(tmp_path / "ds")
    assert run("generate", "--config", cfg_file, "--set", f"out_dir={out}") == 0
    ckpt = _stub_checkpoint(tmp_path, "zero_ckpt", "f4", zero=True)
    img_dir = str(tmp_path / "imgs")
    assert run("visualize-gates", "--config", cfg_file, "--set", f"out_dir={img_dir}",
               "--checkpoint", ckpt,
               "--clip", os.path.join(out, "dataset", "id0000_cam0")) == 0
    capsys.readouterr()
    names = sorted(os.listdir(img_dir))
    gate_images = [n for n in names if "gate" in n and n.endswith(".pgm")]
    assert gate_images
    for name in gate_images:
        blob = open(os.path.join(img_dir, name), "rb").read()
        header, _, pixels = blob.partition(b"255\n")
        assert header.startswith(b"P5\n6 14\n")  # gates live at half the crop extents
        if "fused" in name:
            # both raw gates sit at 0.5, so the fused map is 0.5+0.5-0.25
            assert set(pixels) == {191}
        else:
            assert set(pixels) == {128}  # sigmoid(0) maps to mid-gray
    sidecar = open(os.path.join(img_dir, "gate_images.txt")).read()
    assert "range_fused = 0.0 1.0" in sidecar
    assert "overlap_mean" in sidecar


def test_fused_gate_images_identical_across_f3_f4(tmp_path, cfg_file, capsys):
    out = str(tmp_path / "ds")
    assert run("generate", "--config", cfg_file, "--set", f"out_dir={out}") == 0
    clip = os.path.join(out, "dataset", "id0001_cam1")
    images = {}
    for mode in ("f3", "f4"):
        ckpt = _stub_checkpoint(tmp_path, f"ckpt_{mode}", mode)
        img_dir = str(tmp_path / f"imgs_{mode}")
        assert run("visualize-gates", "--config", cfg_file,
                   "--set", f"out_dir={img_dir}", "--set", f"fusion_mode={mode}",
                   "--checkpoint", ckpt, "--clip", clip) == 0
        images[mode] = {n: open(os.path.join(img_dir, n), "rb").read()
                        for n in os.listdir(img_dir) if n.endswith("_gate_fused.pgm")}
    capsys.readouterr()
    assert images["f3"].keys() == images["f4"].keys() and images["f3"]
    assert images["f3"] == images["f4"]


# ---------------------------------------------------------------------------
# gradcheck

def test_gradcheck_passes_and_reports(tmp_path, capsys):
    assert run("gradcheck", "--set", f"out_dir={tmp_path / 'gc'}") == 0
    printed = capsys.readouterr().out
    assert "conv2d_same" in printed
    assert "end_to_end_pair_loss[f4]" in printed
    assert "status = pass" in printed


def test_gradcheck_detects_injected_corruption(tmp_path, capsys):
    assert run("gradcheck", "--set", f"out_dir={tmp_path / 'gc'}",
               "--inject-adjoint-error", "dense:1.5") == 2
    printed = capsys.readouterr().out
    assert "status = FAIL" in printed
