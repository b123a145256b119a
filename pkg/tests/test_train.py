import dataclasses
import math

import numpy as np
import pytest

from relpos import autodiff as ad
from relpos.autodiff import Tensor, backward
from relpos.data import SyntheticSpec, generate, split_dataset
from relpos.embeddings import MODES, PositionalConfig
from relpos.errors import EmptyDatasetError
from relpos.model import ModelConfig, forward, init_params, loss, named_parameters
from relpos.train import (
    AdamWState,
    TrainConfig,
    adamw_step,
    average_over_seeds,
    cosine_lr,
    evaluate_top1,
    top1_from_logits,
    train,
    write_metrics_csv,
)


def small_config(mode="pe", classes=4):
    return ModelConfig(
        image_side=8,
        channels=1,
        patch_size=2,
        embed_dim=16,
        heads=2,
        blocks=1,
        mlp_ratio=2.0,
        classes=classes,
        positional=PositionalConfig(mode),
    )


def quadrant_data(count=64, seed=0, noise=0.0):
    return generate(
        SyntheticSpec(
            task="quadrant", image_side=8, patch_size=2, noise_sigma=noise, count=count, seed=seed
        )
    )


# ---------------------------------------------------------------------------
# learning-rate schedule


def test_cosine_peak_at_end_of_warmup():
    assert cosine_lr(10, 100, 3e-3, warmup_steps=10) == 3e-3


def test_cosine_reaches_zero():
    assert abs(cosine_lr(100, 100, 1e-3)) < 1e-12
    assert abs(cosine_lr(100, 100, 1e-3, warmup_steps=10)) < 1e-12


def test_cosine_midpoint_is_half():
    assert abs(cosine_lr(50, 100, 1e-3) - 5e-4) < 1e-18


def test_cosine_warmup_is_linear_from_zero():
    assert cosine_lr(0, 100, 1e-3, warmup_steps=10) == 0.0
    assert abs(cosine_lr(5, 100, 1e-3, warmup_steps=10) - 5e-4) < 1e-18


def test_cosine_continuous_at_warmup_boundary():
    before = cosine_lr(99, 1000, 1e-3, warmup_steps=100)
    at = cosine_lr(100, 1000, 1e-3, warmup_steps=100)
    assert abs(at - before) < 2e-5  # one warmup step of slope base_lr/warmup


def test_cosine_rejects_out_of_range_step():
    with pytest.raises(ValueError):
        cosine_lr(101, 100, 1e-3)


# ---------------------------------------------------------------------------
# optimizer


def test_adamw_zero_grads_no_decay_is_identity():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    cfg = TrainConfig(epochs=1, weight_decay=0.0)
    state = AdamWState([p])
    adamw_step([p], [np.zeros(2)], state, lr=0.1, cfg=cfg)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adamw_descends_quadratic():
    p = Tensor(np.array([1.0]), requires_grad=True)
    cfg = TrainConfig(epochs=1, weight_decay=0.0)
    state = AdamWState([p])
    adamw_step([p], [p.data.copy()], state, lr=0.1, cfg=cfg)  # grad of p^2/2 is p
    assert p.data[0] < 1.0


def test_adamw_decay_shrinks_by_exact_factor():
    p = Tensor(np.array([1.0, -4.0]), requires_grad=True)
    cfg = TrainConfig(epochs=1, weight_decay=0.05)
    state = AdamWState([p])
    lr = 0.01
    start = p.data.copy()
    for k in range(1, 4):
        adamw_step([p], [np.zeros(2)], state, lr=lr, cfg=cfg)
        np.testing.assert_allclose(p.data, start * (1 - lr * 0.05) ** k, rtol=1e-15)


# ---------------------------------------------------------------------------
# top-1 accounting


def test_top1_perfect_constant_half():
    labels = np.array([0, 1, 2, 3])
    perfect = np.eye(4)
    assert top1_from_logits(perfect, labels) == 1.0
    constant = np.zeros((4, 4))  # all-equal logits: argmax ties break to class 0
    assert top1_from_logits(constant, labels) == 0.25
    half = np.eye(4)
    half[2:] = np.roll(np.eye(4)[2:], 1, axis=1)
    assert top1_from_logits(half, labels) == 0.5


def test_evaluate_top1_runs_and_rejects_empty():
    cfg = small_config()
    params = init_params(cfg, 0)
    ds = quadrant_data(count=16)
    value = evaluate_top1(params, cfg, ds)
    assert 0.0 <= value <= 1.0
    with pytest.raises(EmptyDatasetError):
        evaluate_top1(params, cfg, ds.subset(np.array([], dtype=int)))


# ---------------------------------------------------------------------------
# training loop


def test_single_epoch_single_batch():
    cfg = small_config()
    tcfg = TrainConfig(epochs=1, batch_size=64, seed=0)
    result = train(cfg, tcfg, quadrant_data(count=16))
    assert len(result.metrics) == 1
    row = result.metrics[0]
    assert math.isfinite(row.train_loss)
    assert 0.0 <= row.train_top1 <= 1.0
    assert 0.0 <= row.eval_top1 <= 1.0


def test_training_is_deterministic():
    cfg = small_config()
    tcfg = TrainConfig(epochs=3, batch_size=16, seed=5)
    ds = quadrant_data(count=48, noise=0.1)
    rows_a = train(cfg, tcfg, ds).metrics
    rows_b = train(cfg, tcfg, ds).metrics
    for a, b in zip(rows_a, rows_b):
        assert (a.epoch, a.lr, a.train_loss, a.train_top1, a.eval_top1) == (
            b.epoch,
            b.lr,
            b.train_loss,
            b.train_top1,
            b.eval_top1,
        )


def test_train_rejects_empty_dataset():
    cfg = small_config()
    ds = quadrant_data(count=8)
    with pytest.raises(EmptyDatasetError):
        train(cfg, TrainConfig(epochs=1), ds.subset(np.array([], dtype=int)))


def test_separable_task_reaches_95_percent_train_accuracy():
    # noise-free bright-patch quadrant labels are separable from pixels alone
    cfg = dataclasses.replace(small_config(), embed_dim=32)
    tcfg = TrainConfig(epochs=50, batch_size=32, base_lr=1e-3, seed=0)
    result = train(cfg, tcfg, quadrant_data(count=64, noise=0.0))
    assert result.metrics[-1].train_top1 > 0.95


@pytest.mark.parametrize("mode", MODES)
def test_single_batch_loss_monotone_for_every_mode(mode):
    cfg = ModelConfig(
        image_side=6,
        channels=1,
        patch_size=2,
        embed_dim=8,
        heads=2,
        blocks=1,
        mlp_ratio=2.0,
        classes=3,
        positional=PositionalConfig(mode),
    )
    rng = np.random.default_rng(0)
    batch = rng.random((8, 6, 6, 1))
    labels = rng.integers(0, 3, 8)
    params = init_params(cfg, 0)
    tensors = [t for _, t in named_parameters(params)]
    state = AdamWState(tensors)
    tcfg = TrainConfig(epochs=1, weight_decay=0.0)
    losses = []
    for _ in range(20):
        for t in tensors:
            t.zero_grad()
        value = loss(forward(params, cfg, batch), labels)
        backward(value)
        losses.append(float(value.data))
        adamw_step(tensors, [t.grad for t in tensors], state, lr=1e-3, cfg=tcfg)
    for earlier, later in zip(losses, losses[1:]):
        assert later <= earlier + 1e-10


def test_gradients_reach_relation_core_during_training():
    cfg = small_config("cre")
    params = init_params(cfg, 0)
    ds = quadrant_data(count=8)
    tensors = [t for _, t in named_parameters(params)]
    value = loss(forward(params, cfg, ds.images), ds.labels)
    backward(value)
    assert np.abs(params.core.grad).max() > 0


# ---------------------------------------------------------------------------
# metrics CSV


def test_metrics_csv_shape_and_determinism(tmp_path):
    cfg = small_config()
    tcfg = TrainConfig(epochs=2, batch_size=16, seed=1)
    rows = train(cfg, tcfg, quadrant_data(count=32)).metrics
    path_a, path_b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_metrics_csv(rows, path_a)
    write_metrics_csv(rows, path_b)
    assert path_a.read_bytes() == path_b.read_bytes()
    lines = path_a.read_text().splitlines()
    assert lines[0] == "epoch,lr,train_loss,train_top1,eval_top1,wall_seconds"
    assert len(lines) == 3
    assert all(line.endswith(",0.000") for line in lines[1:])  # wall column pinned


def test_metrics_csv_can_carry_wall_clock(tmp_path):
    row = dataclasses.replace(
        train(small_config(), TrainConfig(epochs=1, batch_size=8), quadrant_data(count=8)).metrics[0]
    )
    path = tmp_path / "wall.csv"
    write_metrics_csv([row], path, wall_clock=True)
    wall = float(path.read_text().splitlines()[1].split(",")[-1])
    assert wall >= 0.0


# ---------------------------------------------------------------------------
# multi-seed protocol


def test_average_over_seeds_matches_manual_runs():
    cfg = small_config()
    tcfg = TrainConfig(epochs=2, batch_size=16)

    def factory(seed):
        return split_dataset(quadrant_data(count=32, seed=seed), 0.25, seed)

    summary = average_over_seeds(cfg, tcfg, factory, [0, 1, 2])
    manual = []
    for seed in (0, 1, 2):
        tr, ev = factory(seed)
        manual.append(
            train(cfg, dataclasses.replace(tcfg, seed=seed), tr, ev).metrics[-1].eval_top1
        )
    assert summary.per_seed == manual
    assert summary.mean == pytest.approx(np.mean(manual))
    assert summary.std == pytest.approx(np.std(manual))
