"""Audio Mamba encoder: patch tokens, class token, bidirectional SSM blocks,
classification head and checkpoint I/O."""

from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .ssm import ScanDirection, SsmParams, ssm_forward


class ConfigError(ValueError):
    pass


class BlockVariant(enum.Enum):
    FOFO = "fofo"  # forward conv, forward SSM (plain Mamba block)
    FOBI = "fobi"  # forward conv shared by forward and backward SSM
    BIBI = "bibi"  # separate backward conv feeding the backward SSM

    @property
    def bidirectional(self) -> bool:
        return self is not BlockVariant.FOFO

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str):
            for m in cls:
                if m.value == value.lower():
                    return m
        return None


class ClsPosition(enum.Enum):
    HEAD = "head"
    MID = "mid"
    END = "end"

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str):
            for m in cls:
                if m.value == value.lower():
                    return m
        return None

    def index(self, num_patches: int) -> int:
        if self is ClsPosition.HEAD:
            return 0
        if self is ClsPosition.MID:
            return num_patches // 2
        return num_patches


@dataclass
class ModelConfig:
    embed_dim: int = 16
    depth: int = 2
    state_dim: int = 4
    expand: int = 2
    conv_kernel: int = 4
    patch_size: int = 16
    n_mels: int = 32
    target_frames: int = 32
    num_classes: int = 2
    variant: BlockVariant = BlockVariant.FOBI
    cls_position: ClsPosition = ClsPosition.MID
    norm_eps: float = 1e-5

    def __post_init__(self) -> None:
        self.variant = BlockVariant(self.variant)
        self.cls_position = ClsPosition(self.cls_position)
        p = self.patch_size
        if self.n_mels % p or self.target_frames % p:
            raise ConfigError(
                f"spectrogram {self.n_mels}x{self.target_frames} not divisible by patch size {p}"
            )
        if min(self.embed_dim, self.depth, self.state_dim, self.expand, self.conv_kernel) < 1:
            raise ConfigError("model dimensions must be positive")

    @classmethod
    def small(cls, **kw) -> "ModelConfig":
        return cls(**{"embed_dim": 384, "depth": 24, "state_dim": 16, "n_mels": 128,
                      "target_frames": 1024, "num_classes": 527, **kw})

    @classmethod
    def base(cls, **kw) -> "ModelConfig":
        return cls(**{"embed_dim": 768, "depth": 24, "state_dim": 16, "n_mels": 128,
                      "target_frames": 1024, "num_classes": 527, **kw})

    @property
    def d_inner(self) -> int:
        return self.expand * self.embed_dim

    @property
    def grid(self) -> tuple[int, int]:
        return self.n_mels // self.patch_size, self.target_frames // self.patch_size

    @property
    def num_patches(self) -> int:
        rows, cols = self.grid
        return rows * cols

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def cls_index(self) -> int:
        return self.cls_position.index(self.num_patches)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["cls_position"] = self.cls_position.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TokenSequence:
    tokens: Tensor  # (..., num_patches + 1, D)
    cls_index: int

    def __len__(self) -> int:
        return self.tokens.shape[-2]


# ------------------------------------------------------------------ weights

def _param(a, dtype) -> Tensor:
    return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)


@dataclass
class AumBlockWeights:
    norm_gamma: Tensor
    norm_beta: Tensor
    in_proj: Tensor  # (D, 2 * Di) -> main branch, gate branch
    conv_fwd: Tensor  # (K, Di)
    conv_fwd_bias: Tensor
    ssm_fwd: SsmParams
    out_proj: Tensor  # (Di, D)
    conv_bwd: Tensor | None = None
    conv_bwd_bias: Tensor | None = None
    ssm_bwd: SsmParams | None = None

    @classmethod
    def init(cls, cfg: ModelConfig, variant: BlockVariant, rng: np.random.Generator, dtype=np.float32):
        D, Di, K, N = cfg.embed_dim, cfg.d_inner, cfg.conv_kernel, cfg.state_dim

        def unif(fan_in, shape):
            b = 1.0 / math.sqrt(fan_in)
            return _param(rng.uniform(-b, b, size=shape), dtype)

        w = cls(
            norm_gamma=_param(np.ones(D), dtype),
            norm_beta=_param(np.zeros(D), dtype),
            in_proj=unif(D, (D, 2 * Di)),
            conv_fwd=unif(K, (K, Di)),
            conv_fwd_bias=unif(K, (Di,)),
            ssm_fwd=SsmParams.init(Di, N, rng, dtype),
            out_proj=unif(Di, (Di, D)),
        )
        if variant.bidirectional:
            w.ssm_bwd = SsmParams.init(Di, N, rng, dtype)
        if variant is BlockVariant.BIBI:
            w.conv_bwd = unif(K, (K, Di))
            w.conv_bwd_bias = unif(K, (Di,))
        return w

    def validate(self, variant: BlockVariant) -> None:
        has_bwd_ssm = self.ssm_bwd is not None
        has_bwd_conv = self.conv_bwd is not None
        if has_bwd_ssm != variant.bidirectional:
            raise ConfigError(f"{variant.name} block {'needs' if variant.bidirectional else 'must not have'} backward SSM parameters")
        if has_bwd_conv != (variant is BlockVariant.BIBI):
            raise ConfigError(f"{variant.name} block {'needs' if variant is BlockVariant.BIBI else 'must not have'} a backward conv1d")

    def named_tensors(self, prefix: str = "") -> dict[str, Tensor]:
        out = {
            f"{prefix}norm_gamma": self.norm_gamma,
            f"{prefix}norm_beta": self.norm_beta,
            f"{prefix}in_proj": self.in_proj,
            f"{prefix}conv_fwd": self.conv_fwd,
            f"{prefix}conv_fwd_bias": self.conv_fwd_bias,
        }
        out.update({f"{prefix}ssm_fwd.{k}": v for k, v in self.ssm_fwd.tensors().items()})
        if self.conv_bwd is not None:
            out[f"{prefix}conv_bwd"] = self.conv_bwd
            out[f"{prefix}conv_bwd_bias"] = self.conv_bwd_bias
        if self.ssm_bwd is not None:
            out.update({f"{prefix}ssm_bwd.{k}": v for k, v in self.ssm_bwd.tensors().items()})
        out[f"{prefix}out_proj"] = self.out_proj
        return out


@dataclass
class ModelWeights:
    patch_W: Tensor  # (p*p, D)
    patch_b: Tensor
    cls: Tensor  # (D,)
    pos: Tensor  # (num_patches + 1, D)
    blocks: list[AumBlockWeights]
    final_gamma: Tensor
    final_beta: Tensor
    head_W: Tensor  # (D, num_classes)
    head_b: Tensor

    def named_tensors(self) -> dict[str, Tensor]:
        out = {"patch_W": self.patch_W, "patch_b": self.patch_b, "cls": self.cls, "pos": self.pos}
        for i, blk in enumerate(self.blocks):
            out.update(blk.named_tensors(f"blocks.{i}."))
        out.update({"final_gamma": self.final_gamma, "final_beta": self.final_beta,
                    "head_W": self.head_W, "head_b": self.head_b})
        return out


@dataclass
class Model:
    config: ModelConfig
    weights: ModelWeights
    dtype: type = field(default=np.float32)

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "Model":
        rng = np.random.default_rng(seed)
        D, p = config.embed_dim, config.patch_size
        b = 1.0 / math.sqrt(p * p)
        hb = 1.0 / math.sqrt(D)
        weights = ModelWeights(
            patch_W=_param(rng.uniform(-b, b, size=(p * p, D)), dtype),
            patch_b=_param(rng.uniform(-b, b, size=D), dtype),
            cls=_param(0.02 * rng.standard_normal(D), dtype),
            pos=_param(0.02 * rng.standard_normal((config.num_tokens, D)), dtype),
            blocks=[AumBlockWeights.init(config, config.variant, rng, dtype) for _ in range(config.depth)],
            final_gamma=_param(np.ones(D), dtype),
            final_beta=_param(np.zeros(D), dtype),
            head_W=_param(rng.uniform(-hb, hb, size=(D, config.num_classes)), dtype),
            head_b=_param(np.zeros(config.num_classes), dtype),
        )
        return cls(config, weights, dtype)

    def parameters(self) -> dict[str, Tensor]:
        return self.weights.named_tensors()

    def __call__(self, spectrograms) -> Tensor:
        return model_forward(spectrograms, self)


# --------------------------------------------------------------- operations

def insert_cls_token(emb: Tensor, cls: Tensor, pos: ClsPosition) -> TokenSequence:
    """Insert ``cls`` into ``emb[..., num_patches, D]`` at the position's index."""
    if cls.shape != emb.shape[-1:]:
        raise nx.ShapeError(f"class token {cls.shape} does not match embeddings {emb.shape}")
    n = emb.shape[-2]
    idx = pos.index(n)
    c = nx.broadcast_to(cls, emb.shape[:-2] + (1, cls.shape[0]))
    parts = [nx.slice_along(emb, 0, idx, -2), c, nx.slice_along(emb, idx, n, -2)]
    return TokenSequence(nx.concat(parts, axis=-2), idx)


def add_positional(ts: TokenSequence, P: Tensor) -> TokenSequence:
    if P.shape != ts.tokens.shape[-2:]:
        raise nx.ShapeError(
            f"positional embeddings {P.shape} do not match token sequence {ts.tokens.shape[-2:]}"
        )
    Pb = P if ts.tokens.ndim == 2 else nx.broadcast_to(P, ts.tokens.shape)
    return TokenSequence(nx.add(ts.tokens, Pb), ts.cls_index)


def block_forward(ts: TokenSequence, w: AumBlockWeights, variant: BlockVariant, eps: float = 1e-5) -> TokenSequence:
    w.validate(variant)
    x = ts.tokens
    Di = w.out_proj.shape[0]
    if w.in_proj.shape != (x.shape[-1], 2 * Di):
        raise nx.ShapeError(f"in_proj {w.in_proj.shape} does not fit tokens {x.shape}")
    xz = nx.linear(nx.layer_norm(x, w.norm_gamma, w.norm_beta, eps), w.in_proj)
    xm = nx.slice_along(xz, 0, Di, -1)
    z = nx.slice_along(xz, Di, 2 * Di, -1)
    u = nx.silu(nx.depthwise_conv1d(xm, w.conv_fwd, w.conv_fwd_bias))
    y = ssm_forward(u, w.ssm_fwd, ScanDirection.FORWARD)
    if variant is BlockVariant.FOBI:
        y = nx.add(y, ssm_forward(u, w.ssm_bwd, ScanDirection.BACKWARD))
    elif variant is BlockVariant.BIBI:
        # anti-causal conv: convolve the reversed sequence, then undo the reversal
        ub = nx.flip(nx.depthwise_conv1d(nx.flip(xm, -2), w.conv_bwd, w.conv_bwd_bias), -2)
        y = nx.add(y, ssm_forward(nx.silu(ub), w.ssm_bwd, ScanDirection.BACKWARD))
    out = nx.linear(nx.mul(y, nx.silu(z)), w.out_proj)
    return TokenSequence(nx.add(x, out), ts.cls_index)


def encoder_forward(
    ts: TokenSequence,
    blocks: list[AumBlockWeights],
    variant: BlockVariant,
    final_gamma: Tensor,
    final_beta: Tensor,
    eps: float = 1e-5,
) -> TokenSequence:
    if not blocks:
        raise ConfigError("encoder needs at least one block")
    for w in blocks:
        ts = block_forward(ts, w, variant, eps)
    return TokenSequence(nx.layer_norm(ts.tokens, final_gamma, final_beta, eps), ts.cls_index)


def classify(ts: TokenSequence, W: Tensor, b: Tensor) -> Tensor:
    """Affine head applied to the class token only."""
    return nx.linear(nx.take(ts.tokens, ts.cls_index, axis=-2), W, b)


def patch_tokens(spectrograms: Tensor, p: int) -> Tensor:
    """``(B, F, T) -> (B, num_patches, p*p)`` in time-major patch order."""
    B, F, T = spectrograms.shape
    rows, cols = F // p, T // p
    x = nx.reshape(spectrograms, (B, rows, p, cols, p))
    x = nx.transpose(x, (0, 3, 1, 2, 4))
    return nx.reshape(x, (B, rows * cols, p * p))


def model_forward(spectrograms, model: Model) -> Tensor:
    """Logits ``(B, num_classes)`` for a batch of spectrograms ``(B, F, T)``."""
    cfg, w = model.config, model.weights
    if not isinstance(spectrograms, Tensor):
        spectrograms = Tensor(np.asarray(spectrograms, dtype=model.dtype))
    if spectrograms.ndim == 2:
        spectrograms = nx.reshape(spectrograms, (1,) + spectrograms.shape)
    if spectrograms.shape[1:] != (cfg.n_mels, cfg.target_frames):
        raise nx.ShapeError(
            f"expected spectrograms of shape (B, {cfg.n_mels}, {cfg.target_frames}), got {spectrograms.shape}"
        )
    emb = nx.linear(patch_tokens(spectrograms, cfg.patch_size), w.patch_W, w.patch_b)
    ts = insert_cls_token(emb, w.cls, cfg.cls_position)
    ts = add_positional(ts, w.pos)
    ts = encoder_forward(ts, w.blocks, cfg.variant, w.final_gamma, w.final_beta, cfg.norm_eps)
    return classify(ts, w.head_W, w.head_b)


# --------------------------------------------------------------- checkpoint

CKPT_MAGIC = b"AUMC"
CKPT_VERSION = 1


def save_checkpoint(path, model: Model, extra: dict | None = None, tensors: dict[str, np.ndarray] | None = None) -> None:
    """Write ``AUMC | u32 version | u32 header bytes | JSON header | float32 data``.

    The header echoes the model config and lists ``name, shape, offset`` for
    each tensor; offsets are bytes from the start of the data section.
    """
    arrays = {k: t.data for k, t in model.parameters().items()}
    if tensors:
        arrays.update(tensors)
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(buf)
        offset += len(buf)
    header = json.dumps(
        {"config": model.config.to_dict(), "tensors": entries, "extra": extra or {}},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CKPT_MAGIC:
        raise OSError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CKPT_VERSION:
        raise OSError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12 : 12 + hlen])
    data = raw[12 + hlen :]
    arrays = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arrays[e["name"]] = np.frombuffer(data, dtype="<f4", count=n, offset=e["offset"]).reshape(e["shape"])
    return header, arrays


def load_checkpoint(path, dtype=np.float32) -> tuple[Model, dict]:
    """Rebuild a model from a checkpoint; returns ``(model, extra)``."""
    header, arrays = read_checkpoint(path)
    cfg = ModelConfig.from_dict(header["config"])
    model = Model.init(cfg, seed=0, dtype=dtype)
    for name, t in model.parameters().items():
        if name not in arrays:
            raise OSError(f"{path}: missing tensor {name}")
        if arrays[name].shape != t.shape:
            raise OSError(f"{path}: tensor {name} has shape {arrays[name].shape}, config expects {t.shape}")
        t.data[...] = arrays[name]
    return model, {"extra": header.get("extra", {}), "arrays": arrays}
