import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fmsam.data import (FormatError, IngestionError, MetricError, PoolingHierarchy, PoseSequence, ShapeError,
                        SynthConfig, horizon_frames, load_manifest, mpjpe, pool_joints, replicate_pad,
                        save_dataset, synth_motion, temporal_downsample, unpool_joints, zero_velocity_baseline)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def make_seq(T, J=22, seed=0, fps=50.0):
    return PoseSequence(np.random.default_rng(seed).normal(size=(T, J, 3)), fps, "S1", "walk")


def mpjpe_loop(pred, gt):
    total, n = 0.0, 0
    for t in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            total += math.sqrt(sum((pred[t, j, k] - gt[t, j, k]) ** 2 for k in range(3)))
            n += 1
    return total / n


# --- manifest / CSV ----------------------------------------------------------

def write_manifest(tmp_path, entries, **extra):
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps({"entries": entries, **extra}))
    return path


def test_manifest_two_files(tmp_path):
    for name in ("a.csv", "b.csv"):
        np.savetxt(tmp_path / name, np.arange(132, dtype=float).reshape(2, 66), delimiter=",")
    path = write_manifest(tmp_path, [
        {"path": "a.csv", "subject_id": "S1", "action_label": "walk", "split": "train", "fps": 50},
        {"path": "b.csv", "subject_id": "S2", "action_label": "eat", "split": "test", "fps": 50},
    ])
    ds = load_manifest(path)
    assert len(ds) == 2
    assert ds.splits == ["train", "test"]
    assert ds.sequences[1].subject_id == "S2"


def test_csv_row_reshapes_to_pose(tmp_path):
    np.savetxt(tmp_path / "a.csv", np.arange(66, dtype=float)[None], delimiter=",")
    path = write_manifest(tmp_path, [{"path": "a.csv", "subject_id": "S1", "action_label": "x"}], n_joints=22)
    seq = load_manifest(path).sequences[0]
    assert seq.frames.shape == (1, 22, 3)
    np.testing.assert_array_equal(seq.frames[0, 1], [3, 4, 5])


def test_empty_manifest_warns(tmp_path):
    path = write_manifest(tmp_path, [])
    with pytest.warns(UserWarning):
        ds = load_manifest(path)
    assert len(ds) == 0


def test_missing_file_names_path(tmp_path):
    path = write_manifest(tmp_path, [{"path": "nope.csv", "subject_id": "S1", "action_label": "x"}])
    with pytest.raises(IngestionError, match="nope.csv"):
        load_manifest(path)


def test_bad_column_count(tmp_path):
    np.savetxt(tmp_path / "a.csv", np.zeros((2, 5)), delimiter=",")
    path = write_manifest(tmp_path, [{"path": "a.csv", "subject_id": "S1", "action_label": "x"}])
    with pytest.raises(FormatError):
        load_manifest(path)


def test_save_load_roundtrip(tmp_path):
    ds = synth_motion(SynthConfig(length=12), seed=3)
    manifest = save_dataset(ds, tmp_path)
    loaded = load_manifest(manifest)
    assert len(loaded) == len(ds) == 24
    assert loaded.splits == ds.splits
    assert loaded.hierarchy == ds.hierarchy
    np.testing.assert_allclose(loaded.sequences[5].frames, ds.sequences[5].frames, atol=1e-4)


# --- padding / downsampling --------------------------------------------------

def test_replicate_pad():
    seq = make_seq(3)
    assert np.array_equal(replicate_pad(seq, 0).frames, seq.frames)
    padded = replicate_pad(seq, 2)
    assert len(padded) == 5
    assert np.array_equal(padded.frames[:3], seq.frames)
    assert np.array_equal(padded.frames[3], seq.frames[2]) and np.array_equal(padded.frames[4], seq.frames[2])
    assert np.array_equal(padded.frames[3:], zero_velocity_baseline(seq, 2))
    with pytest.raises(ValueError):
        replicate_pad(seq, -1)


def test_temporal_downsample():
    seq = make_seq(10)
    out = temporal_downsample(seq, 2)
    assert np.array_equal(out.frames, seq.frames[[0, 2, 4, 6, 8]])
    assert out.fps == 25.0
    assert np.array_equal(temporal_downsample(seq, 1).frames, seq.frames)
    with pytest.raises(ValueError):
        temporal_downsample(seq, 0)


@given(st.integers(1, 20), st.integers(0, 20), st.integers(1, 5))
def test_pad_then_downsample_length(t_obs, T, f):
    out = temporal_downsample(replicate_pad(make_seq(t_obs, J=2), T), f)
    assert len(out) == math.ceil((t_obs + T) / f)


def test_horizon_mapping():
    assert horizon_frames() == [2, 4, 8, 10, 14, 25]


# --- pooling -----------------------------------------------------------------

def test_default_hierarchy_sizes():
    h = PoolingHierarchy.default()
    assert h.level_sizes == (66, 36, 21, 12)
    x = np.random.default_rng(0).normal(size=(66, 5))
    for level, rows in enumerate((36, 21, 12)):
        x = pool_joints(x, h, level)
        assert x.shape == (rows, 5)


def test_pool_constant_and_two_point_mean():
    h = PoolingHierarchy((2, 1), (((0, 1),),))
    assert np.allclose(pool_joints(np.full((2, 4), 7.0), h, 0), 7.0)
    out = pool_joints(np.array([[0.0, 1.0], [2.0, 5.0]]), h, 0)
    np.testing.assert_array_equal(out, [[1.0, 3.0]])


def test_pool_shape_error():
    with pytest.raises(ShapeError):
        pool_joints(np.zeros((65, 3)), PoolingHierarchy.default(), 0)


def test_hierarchy_rejects_bad_cover():
    with pytest.raises(ShapeError):
        PoolingHierarchy((3, 1), (((0, 1),),))


def test_unpool_constant():
    h = PoolingHierarchy.default()
    out = unpool_joints(np.full((12, 4), 2.5), h, 2)
    assert out.shape == (21, 4) and np.all(out == 2.5)


@settings(max_examples=30)
@given(arrays(np.float64, (66, 3), elements=finite), arrays(np.float64, (66, 3), elements=finite), finite, finite)
def test_pool_linear(X, Y, a, b):
    h = PoolingHierarchy.default()
    lhs = pool_joints(a * X + b * Y, h, 0)
    rhs = a * pool_joints(X, h, 0) + b * pool_joints(Y, h, 0)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-6)


# --- metric and baseline -----------------------------------------------------

def test_mpjpe_basics():
    gt = np.random.default_rng(1).normal(size=(4, 5, 3))
    assert mpjpe(gt, gt) == 0.0
    assert mpjpe(gt + np.array([3.0, 4.0, 0.0]), gt) == pytest.approx(5.0, abs=1e-12)
    with pytest.raises(MetricError):
        mpjpe(gt, gt[:2])


def test_mpjpe_matches_loop():
    rng = np.random.default_rng(7)
    for _ in range(20):
        p, g = rng.normal(size=(2, 2, 3, 3)) * 100
        assert mpjpe(p, g) == pytest.approx(mpjpe_loop(p, g), abs=1e-10)


@settings(max_examples=40)
@given(arrays(np.float64, (3, 4, 3), elements=finite), arrays(np.float64, (3,), elements=finite))
def test_mpjpe_properties(x, c):
    y = x[::-1].copy()
    assert mpjpe(x, y) == pytest.approx(mpjpe(y, x))
    assert mpjpe(x + c, x) == pytest.approx(float(np.linalg.norm(c)), rel=1e-9, abs=1e-9)


def test_zero_velocity_static_and_ramp():
    rest = np.ones((1, 22, 3))
    obs = np.repeat(rest, 10, axis=0)
    assert mpjpe(zero_velocity_baseline(obs, 25), np.repeat(rest, 25, axis=0)) == 0.0
    v, T = 4.0, 25
    step = np.zeros((22, 3))
    step[:, 0] = v
    obs = np.stack([i * step for i in range(10)])
    future = np.stack([(9 + k) * step for k in range(1, T + 1)])
    assert mpjpe(zero_velocity_baseline(obs, T), future) == pytest.approx(v * (T + 1) / 2)
    assert zero_velocity_baseline(obs, 0).shape == (0, 22, 3)


# --- synthetic data ----------------------------------------------------------

def test_synth_deterministic_and_counts():
    a = synth_motion(SynthConfig(), seed=11)
    b = synth_motion(SynthConfig(), seed=11)
    assert len(a) == 24
    assert all(np.array_equal(x.frames, y.frames) for x, y in zip(a.sequences, b.sequences))
    assert a.splits == b.splits
    assert {s.action_label for s in a.sequences} == {"task0", "task1", "task2"}
    c = synth_motion(SynthConfig(), seed=12)
    assert not np.array_equal(a.sequences[0].frames, c.sequences[0].frames)


def test_synth_zero_amplitude_is_rest_pose():
    ds = synth_motion(SynthConfig(amplitude_scale=0.0, seqs_per_pair=1, length=20), seed=0)
    for seq in ds.sequences:
        assert np.all(seq.frames == seq.frames[0])


def test_synth_desk_split():
    ds = synth_motion(SynthConfig(seqs_per_pair=40, n_train=200), seed=0)
    assert len(ds.split("train")) == 200 and len(ds.split("test")) == 40
