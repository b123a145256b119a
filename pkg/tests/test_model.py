import math

import numpy as np
import pytest

from relpos import autodiff as ad
from relpos.embeddings import MODES, PositionalConfig, learnable_param_count
from relpos.errors import LabelOutOfRangeError, ParseError, ShapeMismatchError
from relpos.grid import dihedral_index_maps, grid_from_patch_count
from relpos.model import (
    ModelConfig,
    _patchify_batch,
    config_hash,
    forward,
    forward_from_patches,
    init_params,
    load_checkpoint,
    loss,
    named_parameters,
    param_specs,
    parameter_count,
    patchify,
    save_checkpoint,
    unpatchify,
)

from oracles import closed_form_param_count


def tiny_config(mode="pe", policy="zero_row", classes=3, blocks=1):
    return ModelConfig(
        image_side=6,
        channels=1,
        patch_size=2,
        embed_dim=8,
        heads=2,
        blocks=blocks,
        mlp_ratio=2.0,
        classes=classes,
        positional=PositionalConfig(mode, class_token_policy=policy),
    )


# ---------------------------------------------------------------------------
# patchify


def test_patchify_zeros():
    out = patchify(np.zeros((6, 6, 1)), 2)
    np.testing.assert_array_equal(out, np.zeros((9, 4)))


def test_patchify_locality():
    image = np.zeros((6, 6, 1))
    image[0:2, 0:2, 0] = 1.0
    out = patchify(image, 2)
    np.testing.assert_array_equal(out[0], np.ones(4))
    np.testing.assert_array_equal(out[1:], np.zeros((8, 4)))


def test_patchify_roundtrip():
    rng = np.random.default_rng(0)
    image = rng.random((8, 8, 3))
    rows = patchify(image, 2)
    np.testing.assert_array_equal(unpatchify(rows, 8, 2, 3), image)


def test_patchify_batch_consistent_with_single():
    rng = np.random.default_rng(1)
    batch = rng.random((3, 6, 6, 2))
    rows = _patchify_batch(batch, 3)
    for b in range(3):
        np.testing.assert_array_equal(rows[b], patchify(batch[b], 3))


def test_patchify_rejects_bad_shapes():
    with pytest.raises(ShapeMismatchError):
        patchify(np.zeros((6, 6)), 2)
    with pytest.raises(ShapeMismatchError):
        patchify(np.zeros((6, 4, 1)), 2)


# ---------------------------------------------------------------------------
# parameter initialization and accounting


def test_init_is_deterministic():
    cfg = tiny_config("sre_plus_pe")
    a = init_params(cfg, seed=7)
    b = init_params(cfg, seed=7)
    for (name_a, ta), (name_b, tb) in zip(named_parameters(a), named_parameters(b)):
        assert name_a == name_b
        np.testing.assert_array_equal(ta.data, tb.data)


def test_different_seeds_differ():
    cfg = tiny_config("pe")
    a = init_params(cfg, seed=0)
    b = init_params(cfg, seed=1)
    assert np.abs(a.pe.data - b.pe.data).max() > 0


def test_mode_determines_positional_parameters():
    sre = init_params(tiny_config("sre"), 0)
    assert sre.core is not None and sre.core.shape == (8,)
    assert sre.pe is None
    pe = init_params(tiny_config("pe"), 0)
    assert pe.pe is not None and pe.core is None
    none = init_params(tiny_config("none"), 0)
    assert none.pe is None and none.core is None


def test_named_parameters_follow_specs():
    cfg = tiny_config("cre_plus_pe", policy="learnable_row", blocks=2)
    params = init_params(cfg, 3)
    named = named_parameters(params)
    specs = param_specs(cfg)
    assert [n for n, _ in named] == [n for n, _, _ in specs]
    assert [t.shape for _, t in named] == [s for _, s, _ in specs]


@pytest.mark.parametrize("mode", MODES)
@pytest.mark.parametrize("policy", ["zero_row", "learnable_row"])
def test_parameter_count_matches_closed_form(mode, policy):
    cfg = tiny_config(mode, policy=policy, blocks=2)
    pos = cfg.positional
    expected = closed_form_param_count(
        patch_dim=cfg.patch_dim,
        embed_dim=cfg.embed_dim,
        hidden=cfg.mlp_hidden,
        blocks=cfg.blocks,
        classes=cfg.classes,
        num_patches=cfg.num_patches,
        uses_pe=pos.uses_pe,
        uses_core=pos.uses_core,
        learnable_cls_row=policy == "learnable_row",
    )
    assert parameter_count(cfg) == expected
    params = init_params(cfg, 0)
    assert sum(t.size for _, t in named_parameters(params)) == expected


@pytest.mark.parametrize("mode", MODES)
def test_positional_share_matches_embedding_accounting(mode):
    cfg = tiny_config(mode)
    positional_names = {"pe", "core", "cls_pos_row"}
    params = init_params(cfg, 0)
    share = sum(t.size for name, t in named_parameters(params) if name in positional_names)
    assert share == learnable_param_count(cfg.positional, cfg.num_patches, cfg.embed_dim)


# ---------------------------------------------------------------------------
# forward invariances


def logit_gap_under_permutation(mode, perm, seed):
    cfg = tiny_config(mode)
    params = init_params(cfg, seed)
    rng = np.random.default_rng(1000 + seed)
    patches = _patchify_batch(rng.random((2, 6, 6, 1)), 2)
    base = forward_from_patches(params, cfg, patches).data
    permuted = forward_from_patches(params, cfg, patches[:, perm, :]).data
    return np.abs(base - permuted).max()


def test_mode_none_is_permutation_invariant():
    rng = np.random.default_rng(2)
    for seed in range(10):
        assert logit_gap_under_permutation("none", rng.permutation(9), seed) < 1e-9


def test_mode_sre_is_reversal_invariant():
    reversal = np.arange(8, -1, -1)
    for seed in range(10):
        assert logit_gap_under_permutation("sre", reversal, seed) < 1e-9


def test_mode_cre_is_dihedral_invariant():
    maps = dihedral_index_maps(grid_from_patch_count(9))
    for seed in range(3):
        for perm in maps:
            assert logit_gap_under_permutation("cre", perm, seed) < 1e-9


def test_mode_pe_is_permutation_sensitive():
    perm = np.roll(np.arange(9), 1)
    assert logit_gap_under_permutation("pe", perm, 0) > 1e-6


def test_forward_shapes_and_validation():
    cfg = tiny_config()
    params = init_params(cfg, 0)
    batch = np.random.default_rng(3).random((4, 6, 6, 1))
    assert forward(params, cfg, batch).shape == (4, 3)
    with pytest.raises(ShapeMismatchError):
        forward(params, cfg, batch[:, :4])


# ---------------------------------------------------------------------------
# loss


def test_loss_uniform_logits_is_log_classes():
    logits = ad.Tensor(np.zeros((5, 4)))
    value = float(loss(logits, [0, 1, 2, 3, 0]).data)
    assert abs(value - math.log(4)) < 1e-12


def test_loss_confident_correct_is_small_and_nonnegative():
    logits = ad.Tensor(np.eye(3) * 50)
    assert 0.0 <= float(loss(logits, [0, 1, 2]).data) < 1e-9


def test_loss_label_out_of_range():
    logits = ad.Tensor(np.zeros((2, 3)))
    with pytest.raises(LabelOutOfRangeError):
        loss(logits, [0, 3])


# ---------------------------------------------------------------------------
# end-to-end gradients (full per-mode sweep lives in the acceptance suite)


def test_end_to_end_gradient_check_single_mode():
    cfg = tiny_config("sre_plus_pe", classes=2)
    params = init_params(cfg, 0)
    rng = np.random.default_rng(5)
    batch = rng.random((3, 6, 6, 1))
    labels = rng.integers(0, 2, 3)
    tensors = [t for _, t in named_parameters(params)]
    err = ad.finite_diff_check(
        lambda _: loss(forward(params, cfg, batch), labels), tensors
    )
    assert err < 1e-4


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip_bitwise(tmp_path):
    cfg = tiny_config("cre_plus_pe", policy="learnable_row")
    params = init_params(cfg, 11)
    path = tmp_path / "checkpoint.txt"
    save_checkpoint(path, cfg, params)
    loaded = load_checkpoint(path, cfg)
    for (name_a, ta), (name_b, tb) in zip(named_parameters(params), named_parameters(loaded)):
        assert name_a == name_b
        np.testing.assert_array_equal(ta.data, tb.data)
    header = path.read_text().splitlines()[0].split()
    assert header == [config_hash(cfg), "cre_plus_pe", "9", "8", "2", "1", "3"]


def test_checkpoint_rejects_other_config(tmp_path):
    cfg = tiny_config("pe")
    path = tmp_path / "checkpoint.txt"
    save_checkpoint(path, cfg, init_params(cfg, 0))
    with pytest.raises(ParseError):
        load_checkpoint(path, tiny_config("sre"))
