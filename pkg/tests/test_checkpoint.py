"""Checkpoint round trips must be bit-exact for every stored array."""
import os

import numpy as np
import pytest

from gatereid.checkpoint import load_checkpoint, save_checkpoint
from gatereid.losses import ClassifierParams
from gatereid.network import NetworkConfig, init_network_params, sequence_forward
from gatereid.synth import generate_dataset
from gatereid.training import (
    AdamState,
    TrainConfig,
    compute_channel_stats,
    normalize_clip,
    train,
    trainable_dict,
)

CFG = NetworkConfig(height=32, width=16, conv1_out=4, conv1_of_out=4,
                    gate_hidden=6, state_dim=12, feature_dim=12,
                    conv2_out=6, conv3_out=8, kernel_size=3)


def make_state(dtype=np.float32):
    rng = np.random.default_rng(9)
    params = init_network_params(CFG, (28, 12), rng, dtype=dtype)
    classifier = ClassifierParams.init(5, CFG.feature_dim, rng, dtype=dtype)
    adam = AdamState.fresh(trainable_dict(params, classifier))
    for name in adam.m:
        adam.m[name] += rng.standard_normal(adam.m[name].shape)
        adam.v[name] += rng.uniform(0, 1, adam.v[name].shape)
    adam.step = 17
    stats = compute_channel_stats(
        generate_dataset(num_identities=2, frame_count_range=(6, 8),
                         frame_hw=(32, 16), seed=3).clips)
    return params, classifier, adam, stats


def test_round_trip_bit_exact(tmp_path):
    params, classifier, adam, stats = make_state()
    save_checkpoint(str(tmp_path), params, classifier, adam, stats, epoch=7)
    bundle = load_checkpoint(str(tmp_path))

    assert bundle.config == CFG
    assert bundle.epoch == 7
    assert bundle.params.input_hw == (28, 12)
    assert set(bundle.params.names()) == set(params.names())
    for name in params.names():
        original = params[name].data
        loaded = bundle.params[name].data
        assert loaded.dtype == original.dtype
        assert loaded.tobytes() == original.tobytes()
        assert bundle.params[name].requires_grad
    assert bundle.classifier.weight.data.tobytes() == classifier.weight.data.tobytes()
    assert bundle.adam.step == 17
    for name in adam.m:
        assert bundle.adam.m[name].tobytes() == adam.m[name].tobytes()
        assert bundle.adam.v[name].tobytes() == adam.v[name].tobytes()
    assert bundle.stats.mean.tobytes() == stats.mean.tobytes()
    assert bundle.stats.std.tobytes() == stats.std.tobytes()


def test_round_trip_float64(tmp_path):
    params, classifier, adam, stats = make_state(dtype=np.float64)
    save_checkpoint(str(tmp_path), params, classifier, adam, stats)
    bundle = load_checkpoint(str(tmp_path))
    assert bundle.params.dtype == np.float64
    for name in params.names():
        assert bundle.params[name].data.tobytes() == params[name].data.tobytes()


def test_loaded_params_reproduce_forward_bitwise(tmp_path):
    params, classifier, adam, stats = make_state()
    save_checkpoint(str(tmp_path), params, classifier, adam, stats)
    bundle = load_checkpoint(str(tmp_path))

    ds = generate_dataset(num_identities=2, frame_count_range=(5, 6),
                          frame_hw=(32, 16), seed=11)
    from gatereid.synth import crop_clip
    clip = normalize_clip(crop_clip(ds.clips[0], 2, 2, 28, 12), stats)
    feat_a, _ = sequence_forward(clip, params, CFG)
    feat_b, _ = sequence_forward(clip, bundle.params, bundle.config)
    assert feat_a.data.tobytes() == feat_b.data.tobytes()


def test_optional_pieces_absent(tmp_path):
    params, _, _, _ = make_state()
    save_checkpoint(str(tmp_path), params)
    bundle = load_checkpoint(str(tmp_path))
    assert bundle.classifier is None
    assert bundle.adam is None
    assert bundle.stats is None
    assert bundle.epoch == 0


def test_manifest_is_readable_text(tmp_path):
    params, classifier, adam, stats = make_state()
    save_checkpoint(str(tmp_path), params, classifier, adam, stats, epoch=3)
    text = open(os.path.join(str(tmp_path), "manifest.txt")).read()
    assert "format = gatereid-checkpoint" in text
    assert "epoch = 3" in text
    assert "config.fusion_mode = f4" in text
    assert "array = param/rnn_weight f4 12 " in text
    # one binary file per manifest array line
    n_arrays = sum(1 for line in text.splitlines() if line.startswith("array = "))
    n_files = len([f for f in os.listdir(str(tmp_path)) if f.endswith(".bin")])
    assert n_arrays == n_files


def test_missing_manifest_rejected(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(str(tmp_path / "nowhere"))


def test_wrong_format_rejected(tmp_path):
    params, _, _, _ = make_state()
    save_checkpoint(str(tmp_path), params)
    manifest = os.path.join(str(tmp_path), "manifest.txt")
    text = open(manifest).read().replace("gatereid-checkpoint", "something-else")
    open(manifest, "w").write(text)
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(str(tmp_path))


def test_truncated_array_rejected(tmp_path):
    params, _, _, _ = make_state()
    save_checkpoint(str(tmp_path), params)
    victim = os.path.join(str(tmp_path), "param__rnn_weight.bin")
    blob = open(victim, "rb").read()
    open(victim, "wb").write(blob[:-4])
    with pytest.raises(ValueError, match="values"):
        load_checkpoint(str(tmp_path))


def test_resume_through_checkpoint_matches_direct_run(tmp_path):
    # save after 2 epochs, reload from disk, run 2 more: identical to 4 straight
    ds = generate_dataset(num_identities=3, frame_count_range=(6, 9),
                          frame_hw=(32, 16), seed=19)
    tcfg = TrainConfig(epochs=2, pos_pairs_per_batch=2, neg_pairs_per_batch=2,
                       subseq_len=4, crop_height=28, crop_width=12, rng_seed=5)
    first = train(ds.clips, CFG, tcfg)
    save_checkpoint(str(tmp_path), first.params, first.classifier, first.adam,
                    first.stats, epoch=first.epochs_run)
    bundle = load_checkpoint(str(tmp_path))

    from dataclasses import replace
    from gatereid.training import TrainResult
    resumed = train(ds.clips, bundle.config, replace(tcfg, epochs=4),
                    stats=bundle.stats,
                    resume=TrainResult(bundle.params, bundle.classifier, bundle.adam,
                                       bundle.stats, [], bundle.epoch,
                                       first.id_to_class))
    straight = train(ds.clips, CFG, replace(tcfg, epochs=4))
    for name in straight.params.names():
        assert resumed.params[name].data.tobytes() == straight.params[name].data.tobytes()
    assert resumed.classifier.weight.data.tobytes() == straight.classifier.weight.data.tobytes()
