"""Vision transformer over replicated RSSI images."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping

import numpy as np

from vital import dam as dam_mod
from vital import numerics as nm
from vital.errors import ConfigError, ShapeError
from vital.fingerprints import FingerprintRecord, to_1d_image
from vital.numerics import Tensor


@dataclass
class VitConfig:
    image_size: int = 206
    patch_size: int = 20
    embed_dim: int = 64
    num_heads: int = 5
    head_dim: int = 16
    num_blocks: int = 1
    encoder_mlp_dims: list[int] = field(default_factory=lambda: [128, 64])
    head_dims: list[int] | None = None
    num_classes: int = 2
    pooling: str = "mean"
    merge: str = "residual_add"
    channels: int = 3
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.encoder_mlp_dims = [int(d) for d in self.encoder_mlp_dims]
        if self.head_dims is None:
            self.head_dims = [128, self.num_classes]
        self.head_dims = [int(d) for d in self.head_dims]
        self.validate()

    def validate(self) -> None:
        ints = [self.image_size, self.patch_size, self.embed_dim, self.num_heads, self.head_dim,
                self.num_blocks, self.num_classes, self.channels]
        if any(int(v) != v or v < 1 for v in ints):
            raise ConfigError("all extents must be positive integers")
        if not self.encoder_mlp_dims or not self.head_dims:
            raise ConfigError("encoder_mlp_dims and head_dims must be non-empty")
        if any(d < 1 for d in self.encoder_mlp_dims + self.head_dims):
            raise ConfigError("layer widths must be positive")
        if self.patch_size > self.image_size:
            raise ConfigError(f"patch size {self.patch_size} exceeds image size {self.image_size}")
        if self.head_dims[-1] != self.num_classes:
            raise ConfigError("last head layer must have num_classes units")
        if self.pooling not in ("mean", "class_token"):
            raise ConfigError(f"unknown pooling {self.pooling!r}")
        if self.merge not in ("residual_add", "concat_project"):
            raise ConfigError(f"unknown merge {self.merge!r}")
        if self.merge == "residual_add" and self.encoder_mlp_dims[-1] != self.embed_dim:
            raise ConfigError(
                f"residual_add needs the last encoder MLP width ({self.encoder_mlp_dims[-1]}) "
                f"to equal embed_dim ({self.embed_dim})"
            )

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def num_tokens(self) -> int:
        return self.num_patches + (1 if self.pooling == "class_token" else 0)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "VitConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown VitConfig keys: {sorted(unknown)}")
        return cls(**d)


def _mlp_shapes(prefix: str, din: int, dims: list[int]) -> list[tuple[str, tuple[int, ...]]]:
    out = []
    for i, dout in enumerate(dims):
        out.append((f"{prefix}.{i}.w", (din, dout)))
        out.append((f"{prefix}.{i}.b", (dout,)))
        din = dout
    return out


def weight_shapes(config: VitConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) list of every trainable array."""
    D, h, dk = config.embed_dim, config.num_heads, config.head_dim
    shapes = [
        ("patch_proj.w", (config.patch_dim, D)),
        ("patch_proj.b", (D,)),
        ("pos_embed", (config.num_tokens, D)),
    ]
    if config.pooling == "class_token":
        shapes.append(("cls_token", (D,)))
    for i in range(config.num_blocks):
        p = f"blocks.{i}"
        shapes += [
            (f"{p}.ln1.gamma", (D,)),
            (f"{p}.ln1.beta", (D,)),
            (f"{p}.attn.w_q", (h, D, dk)),
            (f"{p}.attn.w_k", (h, D, dk)),
            (f"{p}.attn.w_v", (h, D, dk)),
            (f"{p}.attn.w_o", (h * dk, D)),
            (f"{p}.ln2.gamma", (D,)),
            (f"{p}.ln2.beta", (D,)),
        ]
        shapes += _mlp_shapes(f"{p}.mlp", D, config.encoder_mlp_dims)
        if config.merge == "concat_project":
            shapes += [(f"{p}.merge.w", (D + config.encoder_mlp_dims[-1], D)), (f"{p}.merge.b", (D,))]
    shapes += _mlp_shapes("head", D, config.head_dims)
    return shapes


def count_params(shapes) -> int:
    return int(sum(math.prod(s) for _, s in shapes))


def param_count(config: VitConfig) -> int:
    return count_params(weight_shapes(config))


def init_weights(config: VitConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in weight_shapes(config):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            arr = np.ones(shape)
        elif leaf in ("b", "beta"):
            arr = np.zeros(shape)
        elif name in ("pos_embed", "cls_token"):
            arr = rng.normal(0.0, 0.02, size=shape)
        else:
            arr = nm.glorot(rng, shape)
        weights[name] = np.ascontiguousarray(arr, dtype=dtype)
    return weights


# ---------------------------------------------------------------------------
# model pieces


def extract_patches(img2d: np.ndarray, patch_size: int) -> np.ndarray:
    """Non-overlapping ``P x P`` tiles in row-major order, flattened.

    Accepts ``(R, R, C)`` or ``(B, R, R, C)``; partial tiles at the right and
    bottom edges are discarded.
    """
    single = img2d.ndim == 3
    x = img2d[None] if single else img2d
    if x.ndim != 4:
        raise ShapeError(f"expected (R, R, C) or (B, R, R, C), got {img2d.shape}")
    b, hgt, wid, c = x.shape
    P = int(patch_size)
    if P < 1 or P > hgt or P > wid:
        raise ShapeError(f"patch size {P} does not fit image {hgt}x{wid}")
    gh, gw = hgt // P, wid // P
    x = x[:, : gh * P, : gw * P]
    tiles = x.reshape(b, gh, P, gw, P, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, gh * gw, P * P * c)
    return tiles[0] if single else tiles


def embed(patches, weights: Mapping[str, Tensor], config: VitConfig) -> Tensor:
    tokens = nm.dense(patches, weights["patch_proj.w"], weights["patch_proj.b"])
    if config.pooling == "class_token":
        cls = weights["cls_token"]
        lead = tokens.shape[:-2]
        ones = np.ones(lead + (1, 1), dtype=tokens.dtype)
        tokens = nm.concat([nm.mul(ones, cls), tokens], axis=-2)
    return nm.add(tokens, weights["pos_embed"])


def attention(Q, K, V) -> Tensor:
    """``softmax(Q K^T / sqrt(d_k)) V`` over the trailing two axes."""
    Q, K, V = nm._as_tensor(Q), nm._as_tensor(K), nm._as_tensor(V)
    if Q.shape[-1] != K.shape[-1]:
        raise ShapeError(f"query/key widths differ: {Q.shape} vs {K.shape}")
    if K.shape[-2] != V.shape[-2]:
        raise ShapeError(f"key/value token counts differ: {K.shape} vs {V.shape}")
    scores = nm.scale(nm.matmul(Q, nm.swapaxes(K, -1, -2)), 1.0 / math.sqrt(Q.shape[-1]))
    return nm.matmul(nm.softmax(scores, axis=-1), V)


def multi_head(X, w_q, w_k, w_v, w_o) -> Tensor:
    """Self-attention with per-head projections ``(h, D, d_k)`` and output ``(h*d_k, D)``."""
    X, w_q, w_k, w_v, w_o = (nm._as_tensor(t) for t in (X, w_q, w_k, w_v, w_o))
    h, D, dk = w_q.shape
    if X.shape[-1] != D or w_o.shape[0] != h * dk:
        raise ShapeError(f"multi_head: X {X.shape}, per-head weights {w_q.shape}, W_O {w_o.shape}")
    lead, T = X.shape[:-2], X.shape[-2]
    nd = len(lead) + 3
    # (..., T, h, dk) -> (..., h, T, dk)
    to_heads = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)

    def project(w):
        flat = nm.reshape(nm.transpose(w, (1, 0, 2)), (D, h * dk))
        return nm.transpose(nm.reshape(nm.dense(X, flat), lead + (T, h, dk)), to_heads)

    heads = attention(project(w_q), project(w_k), project(w_v))  # (..., h, T, dk)
    merged = nm.reshape(nm.transpose(heads, to_heads), lead + (T, h * dk))
    return nm.dense(merged, w_o)


def _mlp(x, weights, prefix: str, n_layers: int) -> Tensor:
    for i in range(n_layers):
        x = nm.dense(x, weights[f"{prefix}.{i}.w"], weights[f"{prefix}.{i}.b"])
        if i < n_layers - 1:
            x = nm.gelu(x)
    return x


def encoder_block(x, weights: Mapping[str, Tensor], config: VitConfig, index: int = 0) -> Tensor:
    p = f"blocks.{index}"
    eps = config.ln_eps
    a = multi_head(
        nm.layernorm(x, weights[f"{p}.ln1.gamma"], weights[f"{p}.ln1.beta"], eps),
        weights[f"{p}.attn.w_q"], weights[f"{p}.attn.w_k"], weights[f"{p}.attn.w_v"], weights[f"{p}.attn.w_o"],
    )
    y = nm.add(x, a)
    m = _mlp(nm.layernorm(y, weights[f"{p}.ln2.gamma"], weights[f"{p}.ln2.beta"], eps),
             weights, f"{p}.mlp", len(config.encoder_mlp_dims))
    if config.merge == "residual_add":
        return nm.add(y, m)
    merged = nm.dense(nm.concat([a, m], axis=-1), weights[f"{p}.merge.w"], weights[f"{p}.merge.b"])
    return nm.add(x, merged)


def as_tensors(weights: Mapping[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in weights.items()}


def forward(img2d, weights: Mapping, config: VitConfig) -> Tensor:
    """Logits for one ``(R, R, C)`` image or a ``(B, R, R, C)`` batch."""
    w = {k: (v if isinstance(v, Tensor) else Tensor(v, name=k)) for k, v in weights.items()}
    img = np.asarray(img2d)
    if img.shape[-3:] != (config.image_size, config.image_size, config.channels):
        raise ShapeError(f"image shape {img.shape} does not match config R={config.image_size}")
    dtype = w["patch_proj.w"].dtype
    patches = extract_patches(img.astype(dtype, copy=False), config.patch_size)
    x = embed(patches, w, config)
    for i in range(config.num_blocks):
        x = encoder_block(x, w, config, i)
    pooled = nm.mean(x, axis=-2) if config.pooling == "mean" else nm.getitem(x, (..., 0, slice(None)))
    return _mlp(pooled, w, "head", len(config.head_dims))


@dataclass
class VitModel:
    """Trained weights plus what is needed to map images in and RPs out.

    ``rp_keys[c]`` is the ``(building_id, rp_id)`` of class ``c`` and
    ``rp_xy[c]`` its coordinates; ``ap_ids`` fixes the pixel order.
    """

    config: VitConfig
    weights: dict[str, np.ndarray]
    ap_ids: list[str]
    rp_keys: list[tuple[int, int]]
    rp_xy: list[tuple[float, float]] = field(default_factory=list)

    @property
    def buildings(self) -> list[int]:
        return sorted({b for b, _ in self.rp_keys})

    def meta(self) -> dict:
        return {
            "ap_ids": list(self.ap_ids),
            "rp_keys": [[int(b), int(r)] for b, r in self.rp_keys],
            "rp_xy": [[float(x), float(y)] for x, y in self.rp_xy],
        }

    @classmethod
    def from_meta(cls, config: VitConfig, weights: dict, meta: Mapping) -> "VitModel":
        keys = meta.get("rp_keys") or [[0, c] for c in range(config.num_classes)]
        return cls(
            config, weights,
            ap_ids=list(meta.get("ap_ids", [])),
            rp_keys=[(int(b), int(r)) for b, r in keys],
            rp_xy=[(float(x), float(y)) for x, y in meta.get("rp_xy", [])],
        )

    def logits(self, images2d: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = []
        for s in range(0, len(images2d), batch_size):
            out.append(forward(images2d[s:s + batch_size], self.weights, self.config).data)
        if not out:
            return np.zeros((0, self.config.num_classes), dtype=np.float32)
        return np.concatenate(out)


def predict(fingerprint, model: VitModel, dam_config: dam_mod.DamConfig | None = None):
    """Return ``((building_id, rp_id), logits)`` for one fingerprint.

    ``fingerprint`` is a :class:`FingerprintRecord`, a reduced ``{ap: (min,
    max, mean)}`` mapping, or an ``(A, 3)`` dB array already aligned with
    ``model.ap_ids``.  The augmentation module always runs in eval mode here.
    """
    cfg = dam_mod.DamConfig(image_size=model.config.image_size) if dam_config is None else dam_config
    cfg = replace(cfg, mode="eval", image_size=model.config.image_size)
    if isinstance(fingerprint, (FingerprintRecord, Mapping)):
        reduced = fingerprint.reduce() if isinstance(fingerprint, FingerprintRecord) else fingerprint
        known = set(model.ap_ids)
        # APs the model never saw have no pixel; drop them as evaluation does
        img1d = to_1d_image({ap: v for ap, v in reduced.items() if ap in known}, model.ap_ids)
    else:
        img1d = np.asarray(fingerprint, dtype=np.float64)
    if img1d.shape[0] > cfg.image_size:
        raise ShapeError(f"{img1d.shape[0]} APs exceed image size {cfg.image_size}")
    img2d = dam_mod.apply(img1d, cfg)
    logits = forward(img2d, model.weights, model.config).data
    cls = int(np.argmax(logits))
    return model.rp_keys[cls], logits
