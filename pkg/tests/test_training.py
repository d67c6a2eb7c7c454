import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import fmsam.model
import fmsam.training as training
from fmsam.checkpoint import load_checkpoint, save_checkpoint, schema_path
from fmsam.config import Ablation, ConfigError, TrainingConfig, preset, variant
from fmsam.data import Dataset, PoseSequence
from fmsam.factorisation import export_mask_grids
from fmsam.memory import BetaLog, load_snapshot, save_snapshot
from fmsam.training import (COMPONENTS, TrainingDiverged, bucket_report, build_model,
                            evaluate, lr_schedule, make_windows, predict_windows, prepare_batch,
                            parse_report_csv, run_ablation, total_loss, train, write_metrics_csv)

from conftest import TINY_HIERARCHY
from gradcheck import group_gradient_errors, tiny_objective

DEFAULT_W = TrainingConfig().loss_weights
unit = st.floats(-100, 100, allow_nan=False)


# --- loss composition and schedule ---------------------------------------------

def test_total_loss_default_weights():
    comps = dict(zip(COMPONENTS, (1.0, 2.0, 3.0, 4.0, 5.0)))
    assert total_loss(comps, DEFAULT_W) == pytest.approx(2.5, abs=1e-12)
    assert DEFAULT_W == {"pose": 0.4, "div": 0.15, "cons": 0.15, "sub": 0.15, "task": 0.15}
    assert TrainingConfig().window == 15


def test_total_loss_projection():
    comps = dict(zip(COMPONENTS, (0.7, 9.0, 9.0, 9.0, 9.0)))
    weights = {k: 0.0 for k in COMPONENTS} | {"pose": 1.0}
    assert total_loss(comps, weights) == 0.7


@settings(max_examples=50)
@given(st.sampled_from(COMPONENTS), unit, unit, st.lists(unit, min_size=5, max_size=5))
def test_total_loss_linear_in_each_component(key, a, b, values):
    comps = dict(zip(COMPONENTS, values))
    f = lambda v: total_loss(comps | {key: v}, DEFAULT_W)
    assert f(a) - f(b) == pytest.approx(DEFAULT_W[key] * (a - b), abs=1e-9)


def test_lr_schedule():
    assert lr_schedule(0) == 2e-4
    assert lr_schedule(1) == 2e-4
    assert lr_schedule(4) == pytest.approx(2e-4 * 0.98 ** 2, rel=1e-15)
    assert lr_schedule(100) == pytest.approx(2e-4 * 0.98 ** 50, rel=1e-15)
    with pytest.raises(ValueError):
        lr_schedule(-1)


def test_config_validation_and_override():
    with pytest.raises(ConfigError):
        TrainingConfig(theta_div=-1)
    with pytest.raises(ConfigError):
        TrainingConfig(lr_decay=1.5)
    with pytest.raises(ConfigError, match="bogus"):
        TrainingConfig().override({"bogus": 1})
    with pytest.raises(ConfigError, match="warp"):
        Ablation.from_dict({"warp": True})
    cfg = preset("desk", theta_div=0.0, **{"ablation.memory": False})
    assert cfg.theta_div == 0 and not cfg.ablation.memory and cfg.feature_dim == 48


def test_ablation_dependencies():
    e = Ablation(factorisation=False).effective()
    assert not e.multi_head and not e.dynamic_mask and e.memory
    e = Ablation(memory=False).effective()
    assert not (e.multi_head or e.div_loss or e.cons_loss) and e.factorisation
    assert variant("full") == Ablation()


# --- training loop ---------------------------------------------------------------

def test_tiny_training_is_deterministic(tiny_data, tiny_config):
    a, b = train(tiny_data, tiny_config), train(tiny_data, tiny_config)
    assert a.log == b.log
    for (n, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert torch.equal(p, q), n
    assert torch.equal(a.model.memory.M, b.model.memory.M)


def test_log_has_every_component(tiny_data, tiny_config):
    row = train(tiny_data, tiny_config, epochs=1).log[0]
    for k in COMPONENTS:
        assert f"loss_{k}" in row and f"weighted_{k}" in row
    for k in ("beta_entropy", "occ_sub", "occ_task", "occ_aux", "task_acc", "lr"):
        assert math.isfinite(row[k])


def test_parameter_shapes_constant(tiny_data, tiny_config):
    model = build_model(tiny_config, TINY_HIERARCHY, 3)
    shapes = {n: p.shape for n, p in model.named_parameters()}
    result = train(tiny_data, tiny_config)
    assert {n: p.shape for n, p in result.model.named_parameters()} == shapes


def test_memory_off_makes_no_memory_calls(tiny_data, tiny_config, monkeypatch):
    def boom(*a, **k):
        raise AssertionError("memory touched")

    for name in ("attend", "read", "memory_update", "diversity_loss", "consolidation_loss"):
        monkeypatch.setattr(fmsam.model, name, boom)
    cfg = tiny_config.override({"ablation": {"memory": False}})
    result = train(tiny_data, cfg, epochs=1)
    assert result.model.memory is None
    assert result.log[0]["loss_div"] == 0 and result.log[0]["loss_cons"] == 0
    evaluate(result.model, tiny_data, [2, 4], cfg)


def test_zero_memory_weights_reduce_to_plain_gcn_losses(tiny_data, tiny_config):
    cfg = tiny_config.override({"theta_div": 0.0, "theta_cons": 0.0, "ablation": {"memory": False}})
    row = train(tiny_data, cfg, epochs=1).log[0]
    expected = sum(cfg.loss_weights[k] * row[f"loss_{k}"] for k in ("pose", "sub", "task"))
    assert row["loss_total"] == pytest.approx(expected, rel=1e-12)
    assert row["weighted_div"] == 0 and row["weighted_cons"] == 0


def test_divergence_raises_with_snapshot(tiny_data, tiny_config, monkeypatch):
    monkeypatch.setattr(training, "pose_loss", lambda *a: torch.tensor(float("nan"), dtype=torch.float64))
    with pytest.raises(TrainingDiverged, match="non-finite") as info:
        train(tiny_data, tiny_config)
    assert any(k.startswith("param/") for k in info.value.snapshot)


def test_empty_train_split_rejected(tiny_config):
    with pytest.raises(ValueError):
        train(Dataset(hierarchy=TINY_HIERARCHY), tiny_config)


# --- end-to-end gradient -----------------------------------------------------------

def test_full_objective_gradient_matches_finite_differences():
    cfg, model, components, objective = tiny_objective()
    assert (model.K3, cfg.feature_dim, cfg.n_slots, cfg.t_pred) == (4, 6, 3, 4)
    with torch.no_grad():
        comps = components()
    assert all(float(v) != 0 for v in comps.values()), comps
    errors = group_gradient_errors(model, objective)
    assert set(errors) == {"encoder", "decoder", "mask_gen", "task_head", "subject_embed", "queries",
                           "write_head", "slot_predictor"}
    for group, errs in errors.items():
        assert len(errs) == 20 and max(errs) < 1e-3, (group, max(errs))


# --- evaluation -----------------------------------------------------------------

def test_bucket_report_perfect_prediction_is_zero():
    gt = np.random.default_rng(0).normal(size=(6, 25, 4, 3))
    rep = bucket_report(gt, gt.copy(), np.array([0, 0, 1, 1, 2, 2]), ["a", "b", "c"], [2, 10, 25])
    assert all(v == 0 for row in rep.values.values() for v in row.values())


def static_dataset():
    rng = np.random.default_rng(0)
    seqs, splits = [], []
    for k, action in enumerate(("walk", "eat")):
        pose = rng.normal(size=(4, 3)) * 100
        seqs.append(PoseSequence(np.repeat(pose[None], 40, axis=0), 50.0, "S1", action))
        splits.append("test")
    return Dataset(seqs, splits, TINY_HIERARCHY)


def test_zero_velocity_exact_on_static_data(tiny_config):
    rep = evaluate(None, static_dataset(), [2, 4], tiny_config)
    assert sorted(rep.actions) == ["eat", "walk"]
    assert all(v == 0 for row in rep.values.values() for v in row.values())


def test_baseline_report_reproducible(tiny_data, tiny_config):
    a = evaluate(None, tiny_data, [2, 4], tiny_config)
    b = evaluate(None, tiny_data, [2, 4], tiny_config)
    assert a.to_csv() == b.to_csv()
    assert a.mean_over_horizons() > 0


def test_evaluate_matches_bucket_loop(tiny_data, tiny_config):
    result = train(tiny_data, tiny_config, epochs=1)
    horizons = [1, 2, 4]
    rep = evaluate(result.model, tiny_data, horizons, tiny_config, actions=result.actions)
    win = make_windows(tiny_data, "test", tiny_config, tiny_config.eval_stride, result.actions)
    pred, _, _ = predict_windows(result.model, win.frames)
    gt = win.frames[:, tiny_config.t_obs:]
    assert rep.actions == [a for k, a in enumerate(result.actions) if k in win.task]
    for k, action in enumerate(result.actions):
        if action not in rep.actions:
            continue
        for h in horizons:
            errs = []
            for i in range(len(win)):
                if win.task[i] != k:
                    continue
                dist = [math.sqrt(sum((pred[i, t, j, c] - gt[i, t, j, c]) ** 2 for c in range(3)))
                        for t in range(h) for j in range(4)]
                errs.append(sum(dist) / len(dist))
            assert rep.values[action][h] == pytest.approx(sum(errs) / len(errs), abs=1e-9)


def test_evaluation_is_idempotent_with_frozen_writes(tiny_data, tiny_config):
    result = train(tiny_data, tiny_config, epochs=1)
    M = result.model.memory.M.clone()
    a = evaluate(result.model, tiny_data, [2, 4], tiny_config)
    b = evaluate(result.model, tiny_data, [2, 4], tiny_config)
    assert a.values == b.values
    assert torch.equal(result.model.memory.M, M)


def test_continual_eval_writes(tiny_data, tiny_config):
    cfg = tiny_config.override({"continual_eval": True})
    result = train(tiny_data, cfg, epochs=1)
    step = result.model.memory.step
    evaluate(result.model, tiny_data, [2], cfg)
    assert result.model.memory.step > step


def test_horizon_beyond_prediction_rejected(tiny_data, tiny_config):
    with pytest.raises(ValueError):
        evaluate(None, tiny_data, [10], tiny_config)


def test_report_csv_roundtrip(tiny_data, tiny_config):
    rep = evaluate(None, tiny_data, [2, 4], tiny_config)
    rows = parse_report_csv(rep.to_csv())
    assert rows[0] == rep.header() == ["action", "80ms", "160ms"]
    assert rows[1:] == rep.table_rows()
    assert rows[-1][0] == "Average"


# --- ablation table ----------------------------------------------------------------

def test_ablation_single_variant_table(tiny_data, tiny_config, tmp_path):
    table = run_ablation({"FMS-AM": variant("full")}, tiny_data, tiny_config.override({"epochs": 1}), [2, 4],
                         tmp_path)
    rows = table.csv_rows()
    assert len(rows) == 1
    assert rows[0][1:9] == ["1"] * 8
    assert (tmp_path / "fms-am" / "metrics.csv").exists()
    assert "# seed=0" in table.to_csv()
    assert "✓" in table.render_text() and "shared seed: 0" in table.render_text()


def test_ablation_rows_echo_toggles(tiny_data, tiny_config):
    grid = {"full": variant("full"), "no-memory": variant("no-memory")}
    table = run_ablation(grid, tiny_data, tiny_config.override({"epochs": 1}), [2])
    assert [r[0] for r in table.csv_rows()] == ["full", "no-memory"]
    no_mem = table.csv_rows()[1]
    assert no_mem[1] == "0" and no_mem[5:8] == ["0", "0", "0"] and no_mem[2:5] == ["1", "1", "1"]


# --- persistence -------------------------------------------------------------------

def test_metrics_csv_is_exact(tiny_data, tiny_config, tmp_path):
    result = train(tiny_data, tiny_config, epochs=1)
    write_metrics_csv(result.log, tmp_path / "m.csv")
    import csv
    rows = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert float(rows[0]["loss_pose"]) == result.log[0]["loss_pose"]


def test_checkpoint_roundtrip(tiny_data, tiny_config, tmp_path):
    result = train(tiny_data, tiny_config, epochs=1)
    path = save_checkpoint(result, tiny_config, tmp_path / "ckpt.npz")
    schema = schema_path(path).read_text()
    assert "memory/M\t(3, 24)\tfloat64" in schema and "param/encoder" in schema
    loaded, cfg = load_checkpoint(path)
    assert cfg == tiny_config and loaded.epoch == 1 and loaded.actions == result.actions
    assert torch.equal(loaded.model.memory.M, result.model.memory.M)
    a = evaluate(result.model, tiny_data, [2, 4], tiny_config)
    b = evaluate(loaded.model, tiny_data, [2, 4], tiny_config)
    assert a.values == b.values


def test_resume_matches_uninterrupted_run(tiny_data, tiny_config, tmp_path):
    straight = train(tiny_data, tiny_config)
    first = train(tiny_data, tiny_config, epochs=1)
    save_checkpoint(first, tiny_config, tmp_path / "ckpt.npz")
    resumed, _ = load_checkpoint(tmp_path / "ckpt.npz")
    resumed = train(tiny_data, tiny_config, resume=resumed, epochs=1)
    assert resumed.epoch == 2 and [r["epoch"] for r in resumed.log] == [1, 2]
    assert resumed.log == straight.log
    for p, q in zip(resumed.model.parameters(), straight.model.parameters()):
        assert torch.equal(p, q)


def test_memory_snapshot_and_beta_log(tiny_data, tiny_config, tmp_path):
    model = build_model(tiny_config, TINY_HIERARCHY, 3)
    model.beta_log = BetaLog(tmp_path / "beta.csv", tiny_config.n_slots)
    win = make_windows(tiny_data, "train", tiny_config, 1)
    for start in (0, 4):
        x, _, _ = prepare_batch(win.frames[start:start + 4], tiny_config)
        model.commit_memory(model(x, write=True))
    lines = (tmp_path / "beta.csv").read_text().splitlines()
    assert lines[0] == "step,beta_0,beta_1,beta_2" and len(lines) == 3
    assert sum(float(v) for v in lines[2].split(",")[1:]) == pytest.approx(1.0)
    save_snapshot(model.memory, tmp_path / "mem.npz")
    back = load_snapshot(tmp_path / "mem.npz")
    assert back.step == 2 and torch.equal(back.M, model.memory.M)
    assert torch.equal(back.history_tensor(), model.memory.history_tensor())


def test_history_is_bounded(tiny_config):
    model = build_model(tiny_config.override({"window": 2, "n_windows": 3}), TINY_HIERARCHY, 3)
    for _ in range(10):
        model.memory.push_history(torch.full((3,), 1 / 3, dtype=torch.float64))
    assert len(model.memory.history) == 6


def test_mask_grid_export(tmp_path):
    masks = torch.rand(3, 4, 6)
    paths = export_mask_grids(masks, tmp_path)
    assert [p.name for p in paths] == ["mask_sub.csv", "mask_task.csv", "mask_aux.csv"]
    grid = np.loadtxt(paths[1], delimiter=",")
    np.testing.assert_allclose(grid, masks[1].numpy(), atol=1e-6)
