import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from subseg.errors import EmptyDataset, NonFiniteLoss, ShapeMismatch
from subseg.model import HybridSegNet3d, load_checkpoint
from subseg.patches import plan_patches
from subseg.phantom import make_phantom, make_phantoms
from subseg.training import (
    TrainConfig,
    augment,
    dice_loss,
    one_hot,
    prepare_case,
    sample_training_patch,
    train,
)

from conftest import fast_full_config


def softmax_probs(rng, classes, voxels):
    logits = rng.standard_normal((classes, voxels))
    e = np.exp(logits - logits.max(axis=0))
    return e / e.sum(axis=0)


def dice_formula_oracle(probs, target, eps=1e-5):
    """Plain-python evaluation of the stated Dice-loss formula."""
    c = probs.shape[0]
    total = 0.0
    for k in range(c):
        inter = float((probs[k] * target[k]).sum())
        denom = float(probs[k].sum() + target[k].sum())
        total += (2.0 * inter + eps) / (denom + eps)
    return 1.0 - total / c


# ----------------------------------------------------------------- dice loss


def test_dice_perfect_match_is_zero():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 32, size=(1, 6, 6, 6))
    target = one_hot(torch.from_numpy(labels))
    loss = dice_loss(target.clone(), target)
    assert float(loss) == 0.0


def test_dice_fully_disjoint_is_near_one():
    # every class present in the target; prediction shifts each class by one
    n = 64
    labels = np.repeat(np.arange(32), 2)
    target = one_hot(torch.from_numpy(labels[None]))
    pred_labels = (labels + 1) % 32
    pred = one_hot(torch.from_numpy(pred_labels[None]))
    loss = float(dice_loss(pred, target))
    assert 1.0 - 1e-4 < loss < 1.0


def test_dice_single_voxel_hand_value():
    probs = np.zeros((32, 1))
    probs[7, 0] = 0.5
    probs[np.arange(32) != 7, 0] = 0.5 / 31
    target = np.zeros((32, 1))
    target[7, 0] = 1.0

    class7 = (2 * 0.5 + 1e-5) / (0.5 + 1.0 + 1e-5)
    assert class7 == pytest.approx(2.0 / 3.0, abs=1e-4)

    expected = dice_formula_oracle(probs, target)
    actual = float(dice_loss(torch.from_numpy(probs), torch.from_numpy(target)))
    assert actual == pytest.approx(expected, abs=1e-12)


def test_dice_matches_formula_oracle_random():
    rng = np.random.default_rng(1)
    probs = softmax_probs(rng, 32, 100)
    labels = rng.integers(0, 32, size=(1, 100))
    target = one_hot(torch.from_numpy(labels)).numpy().reshape(32, 100)
    expected = dice_formula_oracle(probs, target)
    actual = float(dice_loss(torch.from_numpy(probs), torch.from_numpy(target)))
    assert actual == pytest.approx(expected, rel=1e-10)


def test_dice_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        dice_loss(torch.zeros(32, 10), torch.zeros(32, 11))


@given(st.integers(0, 2**32 - 1))
def test_dice_bounded(seed):
    rng = np.random.default_rng(seed)
    probs = torch.from_numpy(softmax_probs(rng, 32, 50))
    labels = rng.integers(0, 32, size=(1, 50))
    target = one_hot(torch.from_numpy(labels)).reshape(32, 50).double()
    loss = float(dice_loss(probs, target))
    assert 0.0 <= loss <= 1.0 + 1e-4


@settings(max_examples=30)
@given(st.floats(0.01, 0.8), st.floats(0.01, 0.19), st.integers(1, 31))
def test_dice_monotone_toward_target(p_target, delta, other):
    # single voxel: moving predicted mass toward the target class lowers the loss
    base = np.full((32, 1), (1.0 - p_target - 0.2) / 30)
    base[0, 0] = p_target
    base[other, 0] = 0.2
    moved = base.copy()
    moved[0, 0] += delta
    moved[other, 0] -= delta
    target = np.zeros((32, 1))
    target[0, 0] = 1.0
    l_base = float(dice_loss(torch.from_numpy(base), torch.from_numpy(target)))
    l_moved = float(dice_loss(torch.from_numpy(moved), torch.from_numpy(target)))
    assert l_moved < l_base


def test_dice_gradient_matches_finite_differences():
    eps_fd = 1e-4
    for trial in range(20):
        rng = np.random.default_rng(1000 + trial)
        probs = softmax_probs(rng, 2, 64)
        labels = rng.integers(0, 2, size=64)
        target = np.zeros((2, 64))
        target[labels, np.arange(64)] = 1.0

        t_probs = torch.from_numpy(probs).requires_grad_(True)
        t_target = torch.from_numpy(target)
        dice_loss(t_probs, t_target).backward()
        analytic = t_probs.grad.numpy()

        fd = np.zeros_like(probs)
        for idx in np.ndindex(probs.shape):
            hi = probs.copy()
            lo = probs.copy()
            hi[idx] += eps_fd
            lo[idx] -= eps_fd
            f_hi = float(dice_loss(torch.from_numpy(hi), t_target))
            f_lo = float(dice_loss(torch.from_numpy(lo), t_target))
            fd[idx] = (f_hi - f_lo) / (2 * eps_fd)

        rel = np.linalg.norm(fd - analytic) / np.linalg.norm(analytic)
        assert rel < 1e-3, f"trial {trial}: relative error {rel}"


def test_one_hot_layout():
    grid = torch.tensor([[[[0, 3]]], [[[31, 1]]]])
    oh = one_hot(grid)
    assert oh.shape == (2, 32, 1, 1, 2)
    assert oh[0, 0, 0, 0, 0] == 1.0 and oh[0, 3, 0, 0, 1] == 1.0
    assert oh[1, 31, 0, 0, 0] == 1.0 and oh[1, 1, 0, 0, 1] == 1.0
    assert float(oh.sum()) == 4.0


# ------------------------------------------------------------------- augment


def _patch_pair(rng):
    patch = rng.random((96, 96, 96)).astype(np.float32)
    labels = np.zeros((96, 96, 96), dtype=np.int16)
    labels[20:50, 20:50, 20:50] = 5
    labels[60:80, 60:80, 60:80] = 17
    return patch, labels


def test_augment_prob_zero_is_identity():
    rng = np.random.default_rng(0)
    patch, labels = _patch_pair(rng)
    cfg = TrainConfig(augment_prob=0.0)
    out_p, out_l = augment(patch, labels, np.random.default_rng(1), cfg)
    np.testing.assert_array_equal(out_p, patch)
    np.testing.assert_array_equal(out_l, labels)


def test_augment_deterministic_under_seed():
    rng = np.random.default_rng(3)
    patch, labels = _patch_pair(rng)
    cfg = TrainConfig(augment_prob=1.0)
    p1, l1 = augment(patch, labels, np.random.default_rng(42), cfg)
    p2, l2 = augment(patch, labels, np.random.default_rng(42), cfg)
    np.testing.assert_array_equal(p1, p2)
    np.testing.assert_array_equal(l1, l2)
    assert not np.array_equal(p1, patch)


def test_augment_labels_stay_in_valid_set():
    rng = np.random.default_rng(5)
    patch, labels = _patch_pair(rng)
    cfg = TrainConfig(augment_prob=1.0)
    for seed in range(5):
        _, out_l = augment(patch, labels, np.random.default_rng(seed), cfg)
        assert set(np.unique(out_l)) <= set(np.unique(labels)) | {0}


def test_augment_intensity_stays_in_unit_range():
    rng = np.random.default_rng(6)
    patch, labels = _patch_pair(rng)
    cfg = TrainConfig(augment_prob=1.0, noise_sigma_max=0.05)
    out_p, _ = augment(patch, labels, np.random.default_rng(7), cfg)
    assert out_p.min() >= 0.0 and out_p.max() <= 1.0


# ------------------------------------------------------------------ sampling


def test_sample_degenerate_grid_returns_single_patch():
    rng = np.random.default_rng(0)
    intensity = rng.random((96, 96, 96)).astype(np.float32)
    labels = np.zeros((96, 96, 96), dtype=np.int16)
    labels[10, 10, 10] = 1
    plan = plan_patches((96, 96, 96))
    patch, label_patch = sample_training_patch(intensity, labels, plan, rng)
    np.testing.assert_array_equal(patch, intensity)
    np.testing.assert_array_equal(label_patch, labels)


def test_sample_all_background_falls_back_to_uniform():
    rng = np.random.default_rng(1)
    intensity = rng.random((112, 112, 96)).astype(np.float32)
    labels = np.zeros((112, 112, 96), dtype=np.int16)
    plan = plan_patches((112, 112, 96))
    for _ in range(10):
        patch, label_patch = sample_training_patch(intensity, labels, plan, rng)
        assert patch.shape == (96, 96, 96)
        assert (label_patch == 0).all()


def test_sample_is_foreground_biased():
    rng = np.random.default_rng(2)
    dims = (144, 96, 96)
    intensity = np.zeros(dims, dtype=np.float32)
    labels = np.zeros(dims, dtype=np.int16)
    labels[120:140, 40:60, 40:60] = 3  # only the right edge sees foreground
    intensity[labels > 0] = 0.5
    plan = plan_patches(dims)

    uniform_hits = np.mean([
        (labels[o[0]:o[0]+96, o[1]:o[1]+96, o[2]:o[2]+96] != 0).any()
        for o in plan.offsets
    ])
    assert uniform_hits < 1.0

    draws = 400
    hits = 0
    for _ in range(draws):
        _, label_patch = sample_training_patch(intensity, labels, plan, rng)
        hits += (label_patch != 0).any()
    observed = hits / draws
    expected = 0.5 + 0.5 * uniform_hits
    assert observed > uniform_hits + 0.1
    assert observed == pytest.approx(expected, abs=0.1)


def test_prepare_case_maps_to_class_indices(table):
    phantom = make_phantom(11, table)
    case = prepare_case(phantom.intensity, phantom.labels, table, stride=16, case_id="p11")
    assert case.intensity.shape == case.class_labels.shape
    assert case.class_labels.max() < 32
    assert case.plan.crop_dims == case.intensity.shape
    assert (case.intensity >= 0).all() and (case.intensity <= 1).all()


# ------------------------------------------------------------------ phantoms


def test_make_phantom_deterministic(table):
    a = make_phantom(9, table)
    b = make_phantom(9, table)
    np.testing.assert_array_equal(a.intensity.data, b.intensity.data)
    np.testing.assert_array_equal(a.labels.data, b.labels.data)
    c = make_phantom(10, table)
    assert not np.array_equal(a.labels.data, c.labels.data)


def test_make_phantom_satisfies_invariants(table):
    phantom = make_phantom(0, table)
    labels = phantom.labels.data
    intensity = phantom.intensity.data
    for fs_id in table.freesurfer_ids[1:]:
        assert int((labels == fs_id).sum()) >= 27, f"region {fs_id} too small"
    assert intensity.min() >= 0.0 and intensity.max() <= 1.0
    assert (intensity[labels == 0] == 0).all()
    assert (intensity[labels != 0] > 0).all()
    means = [float(intensity[labels == fs].mean()) for fs in table.freesurfer_ids[1:]]
    assert len({round(m, 2) for m in means}) > 20  # distinct per-class intensity levels


def test_make_phantoms_list(table):
    phantoms = make_phantoms(2, seed=100, table=table)
    assert [p.seed for p in phantoms] == [100, 101]


# ---------------------------------------------------------------- train loop


def _tiny_cases(table, n=1, stride=48):
    phantoms = make_phantoms(n, seed=50, table=table)
    return [prepare_case(p.intensity, p.labels, table, stride=stride, case_id=str(p.seed))
            for p in phantoms]


def test_train_requires_cases(tmp_path, table):
    model = HybridSegNet3d(fast_full_config())
    with pytest.raises(EmptyDataset):
        train(model, [], [], TrainConfig(max_steps=1), tmp_path, table=table)


def test_train_zero_steps_writes_init_checkpoint(tmp_path, table):
    torch.manual_seed(7)
    model = HybridSegNet3d(fast_full_config())
    init_state = {k: v.clone() for k, v in model.state_dict().items()}
    cases = _tiny_cases(table)
    result = train(model, cases, [], TrainConfig(max_steps=0, seed=7), tmp_path, table=table)
    assert result.steps == 0
    loaded, payload = load_checkpoint(result.last_checkpoint, table=table)
    assert payload["step"] == 0
    for key, tensor in loaded.state_dict().items():
        torch.testing.assert_close(tensor, init_state[key], atol=0, rtol=0)


def test_train_is_seeded_reproducible(tmp_path, table):
    cases = _tiny_cases(table)
    cfg = TrainConfig(max_steps=2, batch_size=1, seed=3, val_interval=2,
                      learning_rate=1e-3)
    losses = []
    for run in range(2):
        torch.manual_seed(cfg.seed)
        model = HybridSegNet3d(fast_full_config())
        result = train(model, cases, cases[:1], cfg, tmp_path / f"run{run}", table=table)
        losses.append(result.losses)
    assert losses[0] == losses[1]


def test_train_resume_replays_identical_trajectory(tmp_path, table):
    cases = _tiny_cases(table)
    cfg = TrainConfig(max_steps=4, batch_size=1, seed=5, val_interval=2, learning_rate=1e-3)

    torch.manual_seed(cfg.seed)
    model = HybridSegNet3d(fast_full_config())
    full = train(model, cases, [], cfg, tmp_path / "full", table=table)

    half_cfg = TrainConfig(max_steps=2, batch_size=1, seed=5, val_interval=2, learning_rate=1e-3)
    torch.manual_seed(cfg.seed)
    model2 = HybridSegNet3d(fast_full_config())
    train(model2, cases, [], half_cfg, tmp_path / "half", table=table)

    model3 = HybridSegNet3d(fast_full_config())
    resumed = train(model3, cases, [], cfg, tmp_path / "resumed", table=table,
                    resume_from=tmp_path / "half" / "last.pt")

    assert resumed.losses == full.losses[2:]
    log_full = [json.loads(l) for l in (tmp_path / "full" / "metrics.jsonl").read_text().splitlines()]
    assert [e["step"] for e in log_full] == [1, 2, 3, 4]


def test_train_logs_jsonl_and_raises_on_nonfinite(tmp_path, table):
    cases = _tiny_cases(table)
    cfg = TrainConfig(max_steps=1, batch_size=1, seed=1)
    torch.manual_seed(1)
    model = HybridSegNet3d(fast_full_config())
    result = train(model, cases, [], cfg, tmp_path / "ok", table=table)
    entries = [json.loads(l) for l in result.log_path.read_text().splitlines()]
    assert set(entries[0]) == {"step", "loss", "val_dsc", "wall_time"}
    assert math.isfinite(entries[0]["loss"])

    bad_model = HybridSegNet3d(fast_full_config())
    with torch.no_grad():
        bad_model.head.weight[0, 0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteLoss):
        train(bad_model, cases, [], cfg, tmp_path / "bad", table=table)


def test_adamw_decoupled_weight_decay_shrinks_params():
    lr, wd = 1e-2, 1e-1
    param = torch.nn.Parameter(torch.tensor([2.0, -3.0]))
    opt = torch.optim.AdamW([param], lr=lr, weight_decay=wd)
    before = param.detach().clone()
    (param * 0.0).sum().backward()  # zero gradient
    opt.step()
    torch.testing.assert_close(param.detach(), before * (1.0 - lr * wd))
