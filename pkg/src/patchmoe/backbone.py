"""Minimal patch transformer with MobileViT-style (patch, pixel) token layout.

The model is deliberately small and auditable: a single learned projection of
non-overlapping pixel blocks, learned additive positional embeddings per
(patch, pixel) slot, pre-norm multi-head self-attention, and an MLP sublayer
that can be swapped for a mixture-of-experts block per layer. The activation
after attention and the MLP-input layer norm is the capture point for router
initialization.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import moe as moe_mod
from . import tensor as T
from .tensor import Rng, ScalerParams, Tensor


@dataclass
class ModelConfig:
    num_classes: int
    image_size: int = 64
    patch_size: int = 8       # patch side in pixels
    n_px: int = 4             # pixel positions per patch (perfect square)
    d_model: int = 32
    d_ff: int = 64
    layers: int = 9
    heads: int = 2
    dropout: float = 0.1
    activation: str = "silu"
    moe_layers: tuple[int, ...] = ()
    experts: int = 16
    top_k: int = 1
    router_temperature: float = 1.0
    gate_mode: str = "renorm"
    reduction_factor: int = 2

    def __post_init__(self):
        self.moe_layers = tuple(sorted(int(i) for i in self.moe_layers))
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if any(i < 0 or i >= self.layers for i in self.moe_layers):
            raise ValueError("moe_layers outside 0..layers-1")
        side = math.isqrt(self.n_px)
        if side * side != self.n_px:
            raise ValueError("n_px must be a perfect square")
        if self.patch_size % side != 0:
            raise ValueError("patch_size not divisible by sqrt(n_px)")
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size not divisible by the patch grid")
        if self.d_model % self.heads != 0:
            raise ValueError("d_model not divisible by heads")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def cell(self) -> int:
        """Side length of one pixel position's block."""
        return self.patch_size // math.isqrt(self.n_px)

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["moe_layers"] = list(self.moe_layers)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["moe_layers"] = tuple(d.get("moe_layers", ()))
        return cls(**d)


def desk_config(num_classes: int, **overrides) -> ModelConfig:
    """Default desk-scale configuration: the whole suite runs in minutes."""
    base = dict(num_classes=num_classes, image_size=64, patch_size=8, n_px=4,
                d_model=32, d_ff=64, layers=4, heads=2)
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class PatchTensor:
    """Activations in (batch, patches, pixels-per-patch, channels) layout."""

    tensor: Tensor

    def __post_init__(self):
        if self.tensor.ndim != 4:
            raise ValueError("PatchTensor needs a rank-4 tensor")

    @property
    def batch(self):
        return self.tensor.shape[0]

    @property
    def patches(self):
        return self.tensor.shape[1]

    @property
    def n_px(self):
        return self.tensor.shape[2]

    @property
    def channels(self):
        return self.tensor.shape[3]

    @property
    def shape(self):
        return self.tensor.shape


def unfold(images: np.ndarray, patch_size: int, n_px: int) -> np.ndarray:
    """(B, H, W, C) pixels -> (B, P, n_px, cell*cell*C) blocks. Exact inverse
    of fold."""
    b, h, w, c = images.shape
    side = math.isqrt(n_px)
    cell = patch_size // side
    gy, gx = h // patch_size, w // patch_size
    x = images.reshape(b, gy, side, cell, gx, side, cell, c)
    x = x.transpose(0, 1, 4, 2, 5, 3, 6, 7)  # b, gy, gx, sy, sx, cy, cx, c
    return x.reshape(b, gy * gx, n_px, cell * cell * c)


def fold(blocks: np.ndarray, image_size: int, patch_size: int, n_px: int,
         channels: int = 3) -> np.ndarray:
    b = blocks.shape[0]
    side = math.isqrt(n_px)
    cell = patch_size // side
    g = image_size // patch_size
    x = blocks.reshape(b, g, g, side, side, cell, cell, channels)
    x = x.transpose(0, 1, 3, 5, 2, 4, 6, 7)
    return x.reshape(b, image_size, image_size, channels)


@dataclass
class DenseMLP:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    activation: str = "silu"

    def forward(self, pre: Tensor) -> Tensor:
        h = T.activation(T.add(T.matmul(pre, self.w1), self.b1), self.activation)
        return T.add(T.matmul(h, self.w2), self.b2)

    def parameters(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


@dataclass
class TransformerLayer:
    ln1_gain: Tensor
    ln1_bias: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bq: Tensor
    bk: Tensor
    bv: Tensor
    bo: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    mlp: "DenseMLP | moe_mod.MoEBlock"
    heads: int

    def parameters(self) -> dict[str, Tensor]:
        out = {"ln1.gain": self.ln1_gain, "ln1.bias": self.ln1_bias,
               "attn.wq": self.wq, "attn.bq": self.bq, "attn.wk": self.wk, "attn.bk": self.bk,
               "attn.wv": self.wv, "attn.bv": self.bv, "attn.wo": self.wo, "attn.bo": self.bo,
               "ln2.gain": self.ln2_gain, "ln2.bias": self.ln2_bias}
        prefix = "moe" if isinstance(self.mlp, moe_mod.MoEBlock) else "mlp"
        out.update({f"{prefix}.{k}": v for k, v in self.mlp.parameters().items()})
        return out


@dataclass
class ForwardResult:
    logits: Tensor
    captures: dict[int, Tensor] = field(default_factory=dict)
    routing: dict[int, "moe_mod.RoutingRecord"] = field(default_factory=dict)


class Model:
    """Patch transformer; MLP sublayers are dense until moefied."""

    def __init__(self, config: ModelConfig, rng: Rng | None = None, _empty: bool = False):
        self.config = config
        self.stage = "dense"
        self.finetuned = False
        if _empty:
            self.embed_w = self.embed_b = self.pos = None
            self.layers = []
            self.head_w = self.head_b = None
            return
        if rng is None:
            rng = Rng(0)
        cfg = config
        in_dim = cfg.cell * cfg.cell * 3
        d = cfg.d_model
        self.embed_w = T.parameter(None, rng.child(0), (in_dim, d), scale=1 / math.sqrt(in_dim))
        self.embed_b = T.parameter(np.zeros(d))
        self.pos = T.parameter(None, rng.child(1), (cfg.grid, cfg.grid, cfg.n_px, d), scale=0.02)
        self.layers: list[TransformerLayer] = []
        for i in range(cfg.layers):
            lrng = rng.child(2, i)
            w = lambda j, shape: T.parameter(None, lrng.child(j), shape,
                                             scale=1 / math.sqrt(shape[0]))
            self.layers.append(TransformerLayer(
                ln1_gain=T.parameter(np.ones(d)), ln1_bias=T.parameter(np.zeros(d)),
                wq=w(0, (d, d)), wk=w(1, (d, d)), wv=w(2, (d, d)), wo=w(3, (d, d)),
                bq=T.parameter(np.zeros(d)), bk=T.parameter(np.zeros(d)),
                bv=T.parameter(np.zeros(d)), bo=T.parameter(np.zeros(d)),
                ln2_gain=T.parameter(np.ones(d)), ln2_bias=T.parameter(np.zeros(d)),
                mlp=DenseMLP(w1=w(4, (d, cfg.d_ff)), b1=T.parameter(np.zeros(cfg.d_ff)),
                             w2=w(5, (cfg.d_ff, d)), b2=T.parameter(np.zeros(d)),
                             activation=cfg.activation),
                heads=cfg.heads,
            ))
        self.head_w = T.parameter(None, rng.child(3), (d, cfg.num_classes),
                                  scale=1 / math.sqrt(d))
        self.head_b = T.parameter(np.zeros(cfg.num_classes))

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"embed.w": self.embed_w, "embed.b": self.embed_b, "pos": self.pos}
        for i, layer in enumerate(self.layers):
            out.update({f"layer{i}.{k}": v for k, v in layer.parameters().items()})
        out.update({"head.w": self.head_w, "head.b": self.head_b})
        return out

    # -- forward ------------------------------------------------------------

    def patch_embed(self, images: np.ndarray) -> Tensor:
        """uint8 images -> (B, P, n_px, d) embedded blocks with positions."""
        cfg = self.config
        b, h, w, c = images.shape
        if h != w or h % cfg.patch_size != 0 or c != 3:
            raise ValueError(f"image shape {images.shape} incompatible with config")
        blocks = unfold(images.astype(T.default_dtype()) / 255.0, cfg.patch_size, cfg.n_px)
        x = T.add(T.matmul(Tensor(blocks), self.embed_w), self.embed_b)
        grid = h // cfg.patch_size
        pos = self.pos
        if grid != cfg.grid:  # alternate scale: nearest-neighbor over the patch grid
            rows = (np.arange(grid) * cfg.grid) // grid
            pos = T.take(T.take(pos, rows, axis=0), rows, axis=1)
        pos = T.reshape(pos, (grid * grid, cfg.n_px, cfg.d_model))
        return T.add(x, pos)

    def attention(self, layer: TransformerLayer, x: Tensor) -> Tensor:
        """Pre-norm multi-head self-attention over all (patch, pixel) tokens,
        residual included."""
        b, p, n_px, d = x.shape
        n_tok = p * n_px
        h = layer.heads
        dh = d // h
        tok = T.reshape(x, (b, n_tok, d))
        normed = T.layer_norm(tok, layer.ln1_gain, layer.ln1_bias)

        def split_heads(t):
            return T.transpose(T.reshape(t, (b, n_tok, h, dh)), (0, 2, 1, 3))

        q = split_heads(T.add(T.matmul(normed, layer.wq), layer.bq))
        k = split_heads(T.add(T.matmul(normed, layer.wk), layer.bk))
        v = split_heads(T.add(T.matmul(normed, layer.wv), layer.bv))
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), T.Tensor(1.0 / math.sqrt(dh)))
        attn = T.matmul(T.softmax(scores, axis=-1), v)
        merged = T.reshape(T.transpose(attn, (0, 2, 1, 3)), (b, n_tok, d))
        out = T.add(T.matmul(merged, layer.wo), layer.bo)
        return T.add(x, T.reshape(out, (b, p, n_px, d)))

    def forward(self, images: np.ndarray, train: bool = False, rng: Rng | None = None,
                capture_layers: tuple[int, ...] = ()) -> ForwardResult:
        cfg = self.config
        x = self.patch_embed(images)
        result = ForwardResult(logits=None)
        for i, layer in enumerate(self.layers):
            x = self.attention(layer, x)
            captured = T.layer_norm(x, layer.ln2_gain, layer.ln2_bias)
            if i in capture_layers:
                result.captures[i] = captured
            if isinstance(layer.mlp, moe_mod.MoEBlock):
                sub_out, record = moe_mod.moe_forward(x, captured, layer.mlp)
                result.routing[i] = record
            else:
                sub_out = layer.mlp.forward(captured)
            x = T.add(x, sub_out)
        pooled = T.tmean(x, axis=(1, 2))
        if train and cfg.dropout > 0:
            if rng is None:
                raise ValueError("training forward needs an rng for dropout")
            pooled = T.dropout(pooled, cfg.dropout, rng, active=True)
        result.logits = T.add(T.matmul(pooled, self.head_w), self.head_b)
        return result

    def capture_pre_mlp(self, images: np.ndarray, layer: int) -> Tensor:
        """Activation after attention and the MLP-input layer norm at `layer`:
        the tensor clustered and routed on."""
        if not 0 <= layer < len(self.layers):
            raise ValueError(f"invalid layer {layer}")
        return self.forward(images, capture_layers=(layer,)).captures[layer]

    # -- stats --------------------------------------------------------------

    def parameter_counts(self) -> dict:
        counts = {"total": 0, "moe_layers": 0, "per_expert": {}}
        for name, t in self.named_parameters().items():
            n = int(np.prod(t.shape)) if t.shape else 1
            counts["total"] += n
            if ".moe." in name:
                counts["moe_layers"] += n
        for i, layer in enumerate(self.layers):
            if isinstance(layer.mlp, moe_mod.MoEBlock):
                ex = layer.mlp.experts[0]
                counts["per_expert"][str(i)] = sum(
                    int(np.prod(t.shape)) if t.shape else 1
                    for t in ex.parameters().values())
        return counts


# ---------------------------------------------------------------------------
# Checkpoints: JSON manifest + tensor blob file
# ---------------------------------------------------------------------------


def dense_mlp_hash(layer: TransformerLayer) -> str:
    """Fingerprint of a dense MLP sublayer, recorded when moefying."""
    h = hashlib.sha256()
    for key in ("w1", "b1", "w2", "b2"):
        h.update(np.ascontiguousarray(layer.mlp.parameters()[key].data).tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(model: Model, path: Path | str, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob_path = path.with_suffix(".bin")
    manifest = {
        "stage": model.stage,
        "finetuned": model.finetuned,
        "config": model.config.to_json(),
        "params": [],
        "moe": {},
    }
    if extra:
        manifest["extra"] = extra
    with open(blob_path, "wb") as f:
        for name, t in model.named_parameters().items():
            offset = T.write_blob(f, t.data)
            manifest["params"].append({"name": name, "shape": list(t.shape),
                                       "offset": offset})
    for i, layer in enumerate(model.layers):
        if isinstance(layer.mlp, moe_mod.MoEBlock):
            block = layer.mlp
            manifest["moe"][str(i)] = {
                "experts": block.router.num_experts,
                "top_k": block.router.top_k,
                "temperature": block.router.temperature,
                "gate_mode": block.router.gate_mode,
                "scaler": block.router.scaler.to_json(),
                "indices": [ex.indices.tolist() for ex in block.experts],
                "reduction_factor": model.config.reduction_factor,
                "source_dense_hash": getattr(block, "source_hash", None),
            }
    with open(path, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


class CheckpointError(Exception):
    pass


def load_checkpoint(path: Path | str) -> Model:
    path = Path(path)
    with open(path) as f:
        manifest = json.load(f)
    config = ModelConfig.from_json(manifest["config"])
    model = Model(config, Rng(0))
    # Rebuild MoE blocks before loading weights so their names resolve.
    for key, info in manifest.get("moe", {}).items():
        i = int(key)
        layer = model.layers[i]
        d, e = config.d_model, info["experts"]
        scaler = ScalerParams.from_json(info["scaler"])
        router = moe_mod.Router(
            centroids=T.parameter(np.ones((e, d))), scaler=scaler,
            temperature=info["temperature"], top_k=info["top_k"],
            gate_mode=info["gate_mode"])
        experts = []
        for idx in info["indices"]:
            idx = np.asarray(idx, dtype=np.int64)
            de = idx.shape[0]
            experts.append(moe_mod.ExpertMLP(
                indices=idx,
                ln_gain=T.parameter(np.ones(d)), ln_bias=T.parameter(np.zeros(d)),
                w1=T.parameter(np.zeros((d, de))), b1=T.parameter(np.zeros(de)),
                w2=T.parameter(np.zeros((de, d))), b2=T.parameter(np.zeros(d)),
                gamma=T.parameter(np.zeros(())), x_corr=T.parameter(np.zeros(d)),
                activation=config.activation))
        block = moe_mod.MoEBlock(router=router, experts=experts)
        block.source_hash = info.get("source_dense_hash")
        layer.mlp = block
        model.stage = "moe"
    model.stage = manifest["stage"]
    model.finetuned = manifest.get("finetuned", False)
    params = model.named_parameters()
    blob_path = path.with_suffix(".bin")
    with open(blob_path, "rb") as f:
        for entry in manifest["params"]:
            name = entry["name"]
            if name not in params:
                raise CheckpointError(f"unknown parameter {name} in checkpoint")
            arr = T.read_blob(f, entry["offset"])
            if list(arr.shape) != entry["shape"]:
                raise CheckpointError(f"shape mismatch for {name}")
            params[name].data = arr.astype(T.default_dtype())
    return model
