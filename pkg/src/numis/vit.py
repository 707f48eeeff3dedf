"""Vision Transformer classifier over greyscale images."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import tensor as T
from .nn import Model, glorot, trunc_normal
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    depth: int = 2
    heads: int = 2
    d_model: int = 32
    d_ff: int = 64
    num_labels: int = 2
    channels: int = 1

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.channels != 1:
            raise ValueError("only single-channel (greyscale) input is supported")
        if min(self.depth, self.heads, self.d_model, self.d_ff, self.num_labels) < 1:
            raise ValueError("depth, heads, d_model, d_ff and num_labels must be positive")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.channels


def large16(num_labels: int = 1000) -> ViTConfig:
    """ViT-Large/16 dimensions at 224 px."""
    return ViTConfig(image_size=224, patch_size=16, depth=24, heads=16, d_model=1024, d_ff=4096, num_labels=num_labels)


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """Split an (H, W) image, or a (B, H, W) batch, into row-major flattened patches.

    Returns (N, P*P) or (B, N, P*P) with N = H*W/P².
    """
    img = np.asarray(image)
    single = img.ndim == 2
    if single:
        img = img[None]
    if img.ndim != 3:
        raise ShapeError(f"patchify expects (H, W) or (B, H, W), got {np.shape(image)}")
    b, h, w = img.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} is not divisible into {patch}x{patch} patches")
    gh, gw = h // patch, w // patch
    out = img.reshape(b, gh, patch, gw, patch).transpose(0, 1, 3, 2, 4).reshape(b, gh * gw, patch * patch)
    return out[0] if single else out


def multi_head_self_attention(x: Tensor, wq, bq, wk, bk, wv, bv, wo, bo, heads: int, keep: list | None = None) -> Tensor:
    """MSA over a (B, n, d) batch. Attention weights are appended to ``keep`` when given."""
    b, n, d = x.shape
    if d % heads:
        raise ShapeError(f"d_model {d} not divisible by {heads} heads")
    dk = d // heads

    def split(t: Tensor) -> Tensor:
        t = T.reshape(t, (b, n, heads, dk))
        return T.reshape(T.transpose(t, (0, 2, 1, 3)), (b * heads, n, dk))

    q = split(T.linear(x, wq, bq))
    k = split(T.linear(x, wk, bk))
    v = split(T.linear(x, wv, bv))
    ctx, weights = T.scaled_dot_attention(q, k, v, return_weights=True)
    if keep is not None:
        keep.append(weights.data.reshape(b, heads, n, n))
    ctx = T.reshape(T.transpose(T.reshape(ctx, (b, heads, n, dk)), (0, 2, 1, 3)), (b, n, d))
    return T.linear(ctx, wo, bo)


class ViTModel(Model):
    kind = "vit"

    def __init__(self, config: ViTConfig, seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        d = c.d_model
        self._add("patch.weight", glorot(rng, c.patch_dim, d))
        self._add("patch.bias", np.zeros(d))
        self._add("cls_token", trunc_normal(rng, (d,)))
        self._add("pos_embed", trunc_normal(rng, (c.num_patches + 1, d)))
        for i in range(c.depth):
            p = f"blocks.{i}."
            self._add(p + "ln1.gain", np.ones(d))
            self._add(p + "ln1.bias", np.zeros(d))
            for m in ("q", "k", "v", "o"):
                self._add(p + f"attn.w{m}", glorot(rng, d, d))
                self._add(p + f"attn.b{m}", np.zeros(d))
            self._add(p + "ln2.gain", np.ones(d))
            self._add(p + "ln2.bias", np.zeros(d))
            self._add(p + "ffn.w1", glorot(rng, d, c.d_ff))
            self._add(p + "ffn.b1", np.zeros(c.d_ff))
            self._add(p + "ffn.w2", glorot(rng, c.d_ff, d))
            self._add(p + "ffn.b2", np.zeros(d))
        self._init_head(rng, c.num_labels)
        self.attention_log: list | None = None

    def _init_head(self, rng: np.random.Generator, num_labels: int) -> None:
        self._add("head.weight", trunc_normal(rng, (self.config.d_model, num_labels)))
        self._add("head.bias", np.zeros(num_labels))
        self.head_names = ("head.weight", "head.bias")

    def config_dict(self) -> dict:
        return asdict(self.config)

    def encoder_block(self, x: Tensor, i: int) -> Tensor:
        """Pre-norm block: x + MSA(LN(x)), then + FFN(LN(.))."""
        p = self.params
        pre = f"blocks.{i}."
        h = T.layer_norm(x, p[pre + "ln1.gain"], p[pre + "ln1.bias"])
        h = multi_head_self_attention(
            h,
            *(p[pre + f"attn.{n}"] for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")),
            heads=self.config.heads,
            keep=self.attention_log,
        )
        x = T.add(x, h)
        h = T.layer_norm(x, p[pre + "ln2.gain"], p[pre + "ln2.bias"])
        h = T.linear(T.gelu(T.linear(h, p[pre + "ffn.w1"], p[pre + "ffn.b1"])), p[pre + "ffn.w2"], p[pre + "ffn.b2"])
        return T.add(x, h)

    def embed(self, images: np.ndarray) -> Tensor:
        c = self.config
        imgs = np.asarray(images, dtype=np.float32)
        if imgs.shape[-2:] != (c.image_size, c.image_size):
            raise ShapeError(f"expected {c.image_size}x{c.image_size} images, got {imgs.shape[-2:]}")
        b = imgs.shape[0]
        patches = Tensor(patchify(imgs, c.patch_size))
        tokens = T.linear(patches, self.params["patch.weight"], self.params["patch.bias"])
        cls = T.repeat(T.reshape(self.params["cls_token"], (1, c.d_model)), b, axis=0)
        seq = T.concat([cls, tokens], axis=1)
        return T.add(seq, T.repeat(self.params["pos_embed"], b, axis=0))

    def features(self, images: np.ndarray) -> Tensor:
        x = self.embed(images)
        for i in range(self.config.depth):
            x = self.encoder_block(x, i)
        return T.take(x, (slice(None), 0, slice(None)))

    def forward(self, images: np.ndarray) -> Tensor:
        """Logits of shape (B, num_labels); a single (H, W) image gives (num_labels,)."""
        imgs = np.asarray(images, dtype=np.float32)
        single = imgs.ndim == 2
        if single:
            imgs = imgs[None]
        if imgs.ndim != 3:
            raise ShapeError(f"expected (H, W) or (B, H, W) images, got {imgs.shape}")
        logits = T.linear(self.features(imgs), self.params["head.weight"], self.params["head.bias"])
        return T.take(logits, 0) if single else logits


def replace_head(model: ViTModel, num_labels: int, seed: int = 0) -> ViTModel:
    """Swap in a freshly initialized linear head mapping d_model to ``num_labels``."""
    if num_labels < 1:
        raise ValueError(f"num_labels must be >= 1, got {num_labels}")
    rng = np.random.default_rng(seed)
    model._init_head(rng, num_labels)
    model.config = replace(model.config, num_labels=num_labels)
    return model


def freeze_backbone(model: Model) -> None:
    model.freeze_backbone()


def unfreeze(model: Model) -> None:
    model.unfreeze()
