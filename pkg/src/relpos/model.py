"""Minimal vision transformer with a pluggable positional slot.

Pipeline: patchify -> linear patch projection -> prepend class token ->
add the composed positional matrix -> pre-norm encoder blocks
(attention + MLP, residual around each) -> final layer norm -> linear
head on the class token row. Everything runs on the in-package autodiff
tensors so gradients reach every learnable, the positional core included.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .embeddings import PositionalConfig, compose_positional
from .errors import ParseError, ShapeMismatchError
from .grid import PatchGrid, grid_from_patch_count

LN_EPS = 1e-5
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    image_side: int
    channels: int
    patch_size: int
    embed_dim: int
    heads: int
    blocks: int
    mlp_ratio: float
    classes: int
    positional: PositionalConfig

    def __post_init__(self):
        if self.image_side % self.patch_size != 0:
            raise ShapeMismatchError(
                f"image side {self.image_side} not divisible by patch size {self.patch_size}"
            )
        if self.embed_dim % self.heads != 0:
            raise ShapeMismatchError(
                f"embed dim {self.embed_dim} not divisible by {self.heads} heads"
            )
        if self.blocks < 1 or self.classes < 2 or self.channels < 1:
            raise ValueError("need blocks >= 1, classes >= 2, channels >= 1")
        grid_from_patch_count(self.patches_per_side**2)  # validates the grid

    @property
    def patches_per_side(self) -> int:
        return self.image_side // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.patches_per_side**2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    @property
    def grid(self) -> PatchGrid:
        return grid_from_patch_count(self.num_patches)


@dataclass
class BlockParams:
    ln1_gain: Tensor
    ln1_bias: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor


_BLOCK_FIELDS = tuple(f.name for f in fields(BlockParams))


@dataclass
class ModelParams:
    patch_proj_w: Tensor
    patch_proj_b: Tensor
    cls_token: Tensor
    pe: Tensor | None
    core: Tensor | None
    cls_pos_row: Tensor | None
    blocks: list[BlockParams]
    final_gain: Tensor
    final_bias: Tensor
    head_w: Tensor
    head_b: Tensor


def param_specs(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init) for every learnable, in canonical order.

    init is "normal" (std 0.02), "zeros", or "ones"; the order here fixes
    both the rng draw order and the checkpoint layout.
    """
    d, hidden = cfg.embed_dim, cfg.mlp_hidden
    specs: list[tuple[str, tuple[int, ...], str]] = [
        ("patch_proj_w", (cfg.patch_dim, d), "normal"),
        ("patch_proj_b", (d,), "zeros"),
        ("cls_token", (d,), "zeros"),
    ]
    pos = cfg.positional
    if pos.uses_pe:
        specs.append(("pe", (cfg.num_patches, d), "normal"))
    if pos.uses_core:
        specs.append(("core", (d,), "normal"))
    if pos.class_token_policy == "learnable_row":
        specs.append(("cls_pos_row", (d,), "normal"))
    for b in range(cfg.blocks):
        p = f"block{b}."
        specs += [
            (p + "ln1_gain", (d,), "ones"),
            (p + "ln1_bias", (d,), "zeros"),
            (p + "wq", (d, d), "normal"),
            (p + "bq", (d,), "zeros"),
            (p + "wk", (d, d), "normal"),
            (p + "bk", (d,), "zeros"),
            (p + "wv", (d, d), "normal"),
            (p + "bv", (d,), "zeros"),
            (p + "wo", (d, d), "normal"),
            (p + "bo", (d,), "zeros"),
            (p + "ln2_gain", (d,), "ones"),
            (p + "ln2_bias", (d,), "zeros"),
            (p + "mlp_w1", (d, hidden), "normal"),
            (p + "mlp_b1", (hidden,), "zeros"),
            (p + "mlp_w2", (hidden, d), "normal"),
            (p + "mlp_b2", (d,), "zeros"),
        ]
    specs += [
        ("final_gain", (d,), "ones"),
        ("final_bias", (d,), "zeros"),
        ("head_w", (d, cfg.classes), "normal"),
        ("head_b", (cfg.classes,), "zeros"),
    ]
    return specs


def parameter_count(cfg: ModelConfig) -> int:
    """Total learnables for this config, without allocating anything."""
    return sum(int(np.prod(shape)) for _, shape, _ in param_specs(cfg))


def _assemble(cfg: ModelConfig, tensors: dict[str, Tensor]) -> ModelParams:
    blocks = [
        BlockParams(**{f: tensors[f"block{b}.{f}"] for f in _BLOCK_FIELDS})
        for b in range(cfg.blocks)
    ]
    return ModelParams(
        patch_proj_w=tensors["patch_proj_w"],
        patch_proj_b=tensors["patch_proj_b"],
        cls_token=tensors["cls_token"],
        pe=tensors.get("pe"),
        core=tensors.get("core"),
        cls_pos_row=tensors.get("cls_pos_row"),
        blocks=blocks,
        final_gain=tensors["final_gain"],
        final_bias=tensors["final_bias"],
        head_w=tensors["head_w"],
        head_b=tensors["head_b"],
    )


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Deterministic initialization: weights N(0, 0.02), biases and class token zero."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, shape, init in param_specs(cfg):
        if init == "normal":
            data = rng.normal(0.0, INIT_STD, shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return _assemble(cfg, tensors)


def named_parameters(params: ModelParams) -> list[tuple[str, Tensor]]:
    """All learnables in the canonical param_specs order."""
    out: list[tuple[str, Tensor]] = [
        ("patch_proj_w", params.patch_proj_w),
        ("patch_proj_b", params.patch_proj_b),
        ("cls_token", params.cls_token),
    ]
    if params.pe is not None:
        out.append(("pe", params.pe))
    if params.core is not None:
        out.append(("core", params.core))
    if params.cls_pos_row is not None:
        out.append(("cls_pos_row", params.cls_pos_row))
    for b, bp in enumerate(params.blocks):
        out += [(f"block{b}.{f}", getattr(bp, f)) for f in _BLOCK_FIELDS]
    out += [
        ("final_gain", params.final_gain),
        ("final_bias", params.final_bias),
        ("head_w", params.head_w),
        ("head_b", params.head_b),
    ]
    return out


# ---------------------------------------------------------------------------
# patch extraction


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Split an (H, W, C) image into (N, patch_size^2 * C) flattened patches.

    Patches are ordered row-major over the grid; pixels row-major within
    each patch, channels fastest.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3:
        raise ShapeMismatchError(f"patchify: expected (H, W, C), got {img.shape}")
    h, w, c = img.shape
    if h != w or h % patch_size != 0:
        raise ShapeMismatchError(f"patchify: image {img.shape} not square multiples of {patch_size}")
    return _patchify_batch(img[None], patch_size)[0]


def _patchify_batch(batch: np.ndarray, patch_size: int) -> np.ndarray:
    b, h, w, c = batch.shape
    s = h // patch_size
    x = batch.reshape(b, s, patch_size, s, patch_size, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)  # (B, s, s, p, p, C)
    return x.reshape(b, s * s, patch_size * patch_size * c)


def unpatchify(rows: np.ndarray, image_side: int, patch_size: int, channels: int) -> np.ndarray:
    """Inverse of :func:`patchify`."""
    s = image_side // patch_size
    x = np.asarray(rows, dtype=np.float64).reshape(s, s, patch_size, patch_size, channels)
    x = x.transpose(0, 2, 1, 3, 4)
    return x.reshape(image_side, image_side, channels)


# ---------------------------------------------------------------------------
# forward


def _ln(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    return ad.add(ad.mul(ad.layer_norm_last_axis(x, LN_EPS), gain), bias)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    # collapse leading axes so both gemms in the backward pass are single calls
    shape = x.shape
    if len(shape) > 2:
        out = ad.matmul(ad.reshape(x, (x.size // shape[-1], shape[-1])), w)
        return ad.reshape(ad.add(out, b), shape[:-1] + (w.shape[-1],))
    return ad.add(ad.matmul(x, w), b)


def _attention(x: Tensor, bp: BlockParams, heads: int) -> Tensor:
    # x: (B, T, D)
    dim = x.shape[-1]
    head_dim = dim // heads
    q = _linear(x, bp.wq, bp.bq)
    k = _linear(x, bp.wk, bp.bk)
    v = _linear(x, bp.wv, bp.bv)
    qt = ad.transpose_last_two(q)  # (B, D, T)
    kt = ad.transpose_last_two(k)
    vt = ad.transpose_last_two(v)
    merged = []
    for h in range(heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        qh = ad.transpose_last_two(ad.slice_rows(qt, lo, hi))  # (B, T, hd)
        kh_t = ad.slice_rows(kt, lo, hi)  # (B, hd, T)
        vh = ad.transpose_last_two(ad.slice_rows(vt, lo, hi))  # (B, T, hd)
        scores = ad.scale(ad.matmul(qh, kh_t), 1.0 / np.sqrt(head_dim))  # (B, T, T)
        attn = ad.softmax_last_axis(scores)
        merged.append(ad.transpose_last_two(ad.matmul(attn, vh)))  # (B, hd, T)
    out = ad.transpose_last_two(ad.concat_rows(*merged))  # (B, T, D)
    return _linear(out, bp.wo, bp.bo)


def _mlp(x: Tensor, bp: BlockParams) -> Tensor:
    return _linear(ad.gelu(_linear(x, bp.mlp_w1, bp.mlp_b1)), bp.mlp_w2, bp.mlp_b2)


def forward_from_patches(params: ModelParams, cfg: ModelConfig, patches: np.ndarray) -> Tensor:
    """Logits from pre-extracted patch rows, shape (B, N, patch_dim) -> (B, classes)."""
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 3 or patches.shape[1:] != (cfg.num_patches, cfg.patch_dim):
        raise ShapeMismatchError(
            f"expected patches (B, {cfg.num_patches}, {cfg.patch_dim}), got {patches.shape}"
        )
    batch = patches.shape[0]
    dim = cfg.embed_dim

    tokens = _linear(Tensor(patches), params.patch_proj_w, params.patch_proj_b)
    cls = ad.add(Tensor(np.zeros((batch, 1, dim))), ad.reshape(params.cls_token, (1, 1, dim)))
    tokens = ad.concat_rows(cls, tokens)  # (B, N + 1, D)

    pos = compose_positional(
        cfg.positional,
        cfg.grid,
        dim,
        pe=params.pe,
        core=params.core,
        cls_row=params.cls_pos_row,
    )
    tokens = ad.add(tokens, pos)  # positional matrix broadcasts over the batch

    for bp in params.blocks:
        tokens = ad.add(tokens, _attention(_ln(tokens, bp.ln1_gain, bp.ln1_bias), bp, cfg.heads))
        tokens = ad.add(tokens, _mlp(_ln(tokens, bp.ln2_gain, bp.ln2_bias), bp))

    normed = _ln(tokens, params.final_gain, params.final_bias)
    cls_out = ad.reshape(ad.slice_rows(normed, 0, 1), (batch, dim))
    return _linear(cls_out, params.head_w, params.head_b)


def forward(params: ModelParams, cfg: ModelConfig, batch: np.ndarray) -> Tensor:
    """Logits for a batch of images, (B, H, W, C) -> (B, classes)."""
    batch = np.asarray(batch, dtype=np.float64)
    expected = (cfg.image_side, cfg.image_side, cfg.channels)
    if batch.ndim != 4 or batch.shape[1:] != expected:
        raise ShapeMismatchError(f"expected batch (B, {expected[0]}, {expected[1]}, {expected[2]}), got {batch.shape}")
    return forward_from_patches(params, cfg, _patchify_batch(batch, cfg.patch_size))


def loss(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy over the batch."""
    return ad.cross_entropy_logits(logits, labels)


# ---------------------------------------------------------------------------
# checkpoints: header line, then name / shape / flat values per learnable


def config_hash(cfg: ModelConfig) -> str:
    pos = cfg.positional
    desc = ",".join(
        str(v)
        for v in (
            cfg.image_side,
            cfg.channels,
            cfg.patch_size,
            cfg.embed_dim,
            cfg.heads,
            cfg.blocks,
            repr(cfg.mlp_ratio),
            cfg.classes,
            pos.mode,
            pos.class_token_policy,
            repr(pos.unit),
        )
    )
    return hashlib.sha256(desc.encode("ascii")).hexdigest()[:16]


def save_checkpoint(path, cfg: ModelConfig, params: ModelParams) -> None:
    lines = [
        f"{config_hash(cfg)} {cfg.positional.mode} {cfg.num_patches} "
        f"{cfg.embed_dim} {cfg.heads} {cfg.blocks} {cfg.classes}"
    ]
    for name, tensor in named_parameters(params):
        lines.append(name)
        lines.append(" ".join(str(d) for d in tensor.shape))
        lines.append(" ".join(f"{v:.17g}" for v in tensor.data.ravel()))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path, cfg: ModelConfig) -> ModelParams:
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(f"{path}: empty checkpoint")
    header = lines[0].split()
    if len(header) != 7:
        raise ParseError(f"{path}: malformed header {lines[0]!r}")
    if header[0] != config_hash(cfg):
        raise ParseError(f"{path}: checkpoint written for a different configuration")

    tensors: dict[str, Tensor] = {}
    cursor = 1
    for name, shape, _ in param_specs(cfg):
        if cursor + 2 >= len(lines) + 1:
            raise ParseError(f"{path}: truncated at section {name!r}")
        got_name = lines[cursor]
        if got_name != name:
            raise ParseError(f"{path}: expected section {name!r}, found {got_name!r}")
        got_shape = tuple(int(v) for v in lines[cursor + 1].split())
        if got_shape != shape:
            raise ParseError(f"{path}: section {name!r} has shape {got_shape}, expected {shape}")
        values = np.array(lines[cursor + 2].split(), dtype=np.float64)
        if values.size != int(np.prod(shape)):
            raise ParseError(f"{path}: section {name!r} has {values.size} values")
        tensors[name] = Tensor(values.reshape(shape), requires_grad=True)
        cursor += 3
    return _assemble(cfg, tensors)
