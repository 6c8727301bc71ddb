"""Vision transformer regressor with a masked-autoencoder side branch.

Both branches run the same encoder weights. The regression branch sees
every patch plus a regression token. The reconstruction branch sees only
the kept patches plus the regression token, and a shallow decoder
predicts the pixels of the masked ones. Parameters live in one flat
``name -> tensor`` map, and the forward pass is a pure function of that map.
Gradients come from torch autograd in float64.
"""
from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64


class NonFiniteError(FloatingPointError):
    pass


class Mode(str, enum.Enum):
    REGRESSION_ONLY = "regression_only"
    JOINT = "joint"


@dataclass(frozen=True)
class ModelConfig:
    img_size: tuple[int, int] = (32, 32)
    patch: int = 8
    enc_blocks: int = 4
    enc_heads: int = 4
    enc_dim: int = 64
    mlp_ratio: int = 4
    dec_dim: int = 32
    dec_blocks: int = 2
    dec_heads: int = 4
    mask_ratio: float = 0.75
    alpha: float = 0.1
    full_size: bool = False

    def __post_init__(self):
        h, w = self.img_size
        if h % self.patch or w % self.patch:
            raise ValueError(f"image {self.img_size} not divisible by patch {self.patch}")
        if not 0 < self.mask_ratio < 1:
            raise ValueError("mask_ratio must be in (0, 1)")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must be in [0, 1]")
        if self.enc_dim % self.enc_heads or self.dec_dim % self.dec_heads:
            raise ValueError("embedding dims must be divisible by head counts")
        if self.enc_dim % 4 or self.dec_dim % 4:
            raise ValueError("embedding dims must be multiples of 4 for 2-D sin-cos positions")

    @classmethod
    def vit_tiny(cls, **overrides) -> "ModelConfig":
        """The full-size configuration: 224px, 16px patches, ViT-Tiny encoder, 128-d decoder."""
        base = dict(img_size=(224, 224), patch=16, enc_blocks=12, enc_heads=3, enc_dim=192,
                    mlp_ratio=4, dec_dim=128, dec_blocks=2, dec_heads=16, mask_ratio=0.75,
                    alpha=0.1, full_size=True)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        raw = dict(raw)
        if raw.get("full_size"):
            raw.pop("full_size")
            return cls.vit_tiny(**{k: (tuple(v) if k == "img_size" else v) for k, v in raw.items()})
        if "img_size" in raw:
            raw["img_size"] = tuple(raw["img_size"])
        return cls(**raw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["img_size"] = list(self.img_size)
        return d

    @property
    def grid(self) -> tuple[int, int]:
        return self.img_size[0] // self.patch, self.img_size[1] // self.patch

    @property
    def n_tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def n_masked(self) -> int:
        return int(round(self.mask_ratio * self.n_tokens))


# -- parameter layout -------------------------------------------------------

def _block_shapes(prefix: str, dim: int, ratio: int) -> list[tuple[str, tuple[int, ...]]]:
    hidden = dim * ratio
    return [
        (f"{prefix}.norm1.weight", (dim,)), (f"{prefix}.norm1.bias", (dim,)),
        (f"{prefix}.attn.qkv.weight", (dim, 3 * dim)), (f"{prefix}.attn.qkv.bias", (3 * dim,)),
        (f"{prefix}.attn.proj.weight", (dim, dim)), (f"{prefix}.attn.proj.bias", (dim,)),
        (f"{prefix}.norm2.weight", (dim,)), (f"{prefix}.norm2.bias", (dim,)),
        (f"{prefix}.mlp.fc1.weight", (dim, hidden)), (f"{prefix}.mlp.fc1.bias", (hidden,)),
        (f"{prefix}.mlp.fc2.weight", (hidden, dim)), (f"{prefix}.mlp.fc2.bias", (dim,)),
    ]


def param_layout(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) list; every model has exactly these entries."""
    pp = cfg.patch * cfg.patch
    d, dd = cfg.enc_dim, cfg.dec_dim
    layout = [
        ("patch_norm.weight", (pp,)), ("patch_norm.bias", (pp,)),
        ("patch_embed.weight", (pp, d)), ("patch_embed.bias", (d,)),
        ("reg_token", (d,)),
    ]
    for i in range(cfg.enc_blocks):
        layout += _block_shapes(f"enc.{i}", d, cfg.mlp_ratio)
    layout += [("enc_norm.weight", (d,)), ("enc_norm.bias", (d,)),
               ("reg_head.weight", (d, 1)), ("reg_head.bias", (1,)),
               ("dec_embed.weight", (d, dd)), ("dec_embed.bias", (dd,)),
               ("mask_token", (dd,))]
    for i in range(cfg.dec_blocks):
        layout += _block_shapes(f"dec.{i}", dd, cfg.mlp_ratio)
    layout += [("dec_norm.weight", (dd,)), ("dec_norm.bias", (dd,)),
               ("dec_head.weight", (dd, pp)), ("dec_head.bias", (pp,))]
    return layout


def is_regression_param(name: str) -> bool:
    return name.startswith("reg_head.")


def is_decoder_param(name: str) -> bool:
    return name.startswith(("dec.", "dec_", "mask_token"))


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, torch.Tensor]
    label_mean: float = 0.0
    label_std: float = 1.0

    def validate(self) -> None:
        layout = param_layout(self.config)
        names = [n for n, _ in layout]
        if sorted(names) != sorted(self.tensors):
            missing = set(names) - set(self.tensors)
            extra = set(self.tensors) - set(names)
            raise ValueError(f"parameter map mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, shape in layout:
            if tuple(self.tensors[name].shape) != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {tuple(self.tensors[name].shape)}")

    def count(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def clone(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.detach().clone() for k, v in self.tensors.items()},
                           self.label_mean, self.label_std)


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    gen = torch.Generator().manual_seed(seed)
    tensors = {}
    for name, shape in param_layout(cfg):
        if name.endswith(".bias"):
            t = torch.zeros(shape, dtype=DTYPE)
        elif "norm" in name and name.endswith(".weight"):
            t = torch.ones(shape, dtype=DTYPE)
        elif name in ("reg_token", "mask_token"):
            # a zero token would sit on the layer-norm singularity (all entries equal)
            t = torch.randn(shape, generator=gen, dtype=DTYPE) * 0.02
        elif name == "patch_embed.weight":
            bound = 1.0 / math.sqrt(shape[0])
            t = (torch.rand(shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound
        else:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            t = (torch.rand(shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound
        tensors[name] = t
    return ModelParams(cfg, tensors)


# -- building blocks --------------------------------------------------------

def patchify(img: np.ndarray | torch.Tensor, p: int):
    """(…, H, W) -> (…, N_tok, p*p); tokens row-major over the patch grid."""
    h, w = img.shape[-2:]
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} not divisible by patch {p}")
    lead = tuple(img.shape[:-2])
    x = img.reshape(lead + (h // p, p, w // p, p))
    n = len(lead)
    perm = tuple(range(n)) + (n, n + 2, n + 1, n + 3)
    x = x.permute(perm) if isinstance(x, torch.Tensor) else x.transpose(perm)
    return x.reshape(lead + ((h // p) * (w // p), p * p))


def unpatchify(tokens, p: int, size: tuple[int, int]):
    h, w = size
    gh, gw = h // p, w // p
    lead = tuple(tokens.shape[:-2])
    x = tokens.reshape(lead + (gh, gw, p, p))
    n = len(lead)
    perm = tuple(range(n)) + (n, n + 2, n + 1, n + 3)
    x = x.permute(perm) if isinstance(x, torch.Tensor) else x.transpose(perm)
    return x.reshape(lead + (h, w))


def random_mask(n_tok: int, ratio: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """(kept, masked) token indices, both sorted; round(ratio * n_tok) are masked."""
    if not 0 < ratio < 1:
        raise ValueError("mask ratio must be in (0, 1)")
    n_mask = int(round(ratio * n_tok))
    perm = rng.permutation(n_tok)
    return np.sort(perm[n_mask:]), np.sort(perm[:n_mask])


def batch_masks(batch: int, cfg: ModelConfig, rng: np.random.Generator) -> np.ndarray:
    """Masked-index array (B, n_masked)."""
    return np.stack([random_mask(cfg.n_tokens, cfg.mask_ratio, rng)[1] for _ in range(batch)])


def _sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    out = np.outer(pos.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_table(dim: int, grid: tuple[int, int]) -> torch.Tensor:
    """Fixed 2-D sin-cos positions for the patch grid, with a zero row for the regression token."""
    gh, gw = grid
    yy, xx = np.meshgrid(np.arange(gh, dtype=np.float64), np.arange(gw, dtype=np.float64), indexing="ij")
    emb = np.concatenate([_sincos_1d(dim // 2, yy), _sincos_1d(dim // 2, xx)], axis=1)
    return torch.from_numpy(np.concatenate([np.zeros((1, dim)), emb], axis=0))


def _layer_norm(x, p, name):
    return F.layer_norm(x, (x.shape[-1],), p[f"{name}.weight"], p[f"{name}.bias"], eps=1e-6)


def _attention(x, p, name, heads):
    b, n, d = x.shape
    qkv = x @ p[f"{name}.qkv.weight"] + p[f"{name}.qkv.bias"]
    q, k, v = qkv.reshape(b, n, 3, heads, d // heads).permute(2, 0, 3, 1, 4)
    att = torch.softmax((q @ k.transpose(-2, -1)) / math.sqrt(d // heads), dim=-1)
    out = (att @ v).transpose(1, 2).reshape(b, n, d)
    return out @ p[f"{name}.proj.weight"] + p[f"{name}.proj.bias"]


def _mlp(x, p, name):
    # both dense layers carry GELU
    h = F.gelu(x @ p[f"{name}.fc1.weight"] + p[f"{name}.fc1.bias"])
    return F.gelu(h @ p[f"{name}.fc2.weight"] + p[f"{name}.fc2.bias"])


def transformer_block(x, p, name, heads):
    x = x + _attention(_layer_norm(x, p, f"{name}.norm1"), p, f"{name}.attn", heads)
    return x + _mlp(_layer_norm(x, p, f"{name}.norm2"), p, f"{name}.mlp")


def _check(t, where):
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite activations after {where}")
    return t


def encode(p, patches, cfg: ModelConfig, keep_idx: Optional[torch.Tensor] = None):
    """Shared encoder. ``patches`` (B, N, p*p); ``keep_idx`` (B, n_keep) or None for all."""
    pos = sincos_table(cfg.enc_dim, cfg.grid).to(DTYPE)
    x = _layer_norm(patches, p, "patch_norm") @ p["patch_embed.weight"] + p["patch_embed.bias"]
    x = x + pos[1:]
    if keep_idx is not None:
        x = torch.gather(x, 1, keep_idx[..., None].expand(-1, -1, x.shape[-1]))
    reg = (p["reg_token"] + pos[0]).expand(x.shape[0], 1, -1)
    x = torch.cat([reg, x], dim=1)
    for i in range(cfg.enc_blocks):
        x = transformer_block(x, p, f"enc.{i}", cfg.enc_heads)
    return _check(_layer_norm(x, p, "enc_norm"), "encoder")


def regression_head(p, encoded):
    return (encoded[:, 0] @ p["reg_head.weight"] + p["reg_head.bias"])[:, 0]


def decode(p, encoded, keep_idx, cfg: ModelConfig):
    """Scatter kept tokens back among mask tokens, run the decoder, predict every patch."""
    b = encoded.shape[0]
    n = cfg.n_tokens
    y = encoded @ p["dec_embed.weight"] + p["dec_embed.bias"]
    full = p["mask_token"].expand(b, n, -1)
    full = full.scatter(1, keep_idx[..., None].expand(-1, -1, cfg.dec_dim), y[:, 1:])
    pos = sincos_table(cfg.dec_dim, cfg.grid).to(DTYPE)
    x = torch.cat([y[:, :1], full], dim=1) + pos
    for i in range(cfg.dec_blocks):
        x = transformer_block(x, p, f"dec.{i}", cfg.dec_heads)
    x = _layer_norm(x, p, "dec_norm")[:, 1:]
    return _check(x @ p["dec_head.weight"] + p["dec_head.bias"], "decoder")


def ssat_loss(recon: torch.Tensor, target: torch.Tensor, masked_idx: torch.Tensor) -> torch.Tensor:
    """Pixel MSE over masked patches only."""
    idx = masked_idx[..., None].expand(-1, -1, target.shape[-1])
    diff = torch.gather(recon, 1, idx) - torch.gather(target, 1, idx)
    return (diff ** 2).mean()


@dataclass
class LossBreakdown:
    total: float
    l_reg: float
    l_ssat: float
    masked_patch_count: int


@dataclass
class ForwardResult:
    prediction: torch.Tensor
    reconstruction: Optional[torch.Tensor]
    loss: Optional[torch.Tensor]
    l_reg: Optional[torch.Tensor]
    l_ssat: Optional[torch.Tensor]
    masked_patch_count: int = 0

    def breakdown(self) -> LossBreakdown:
        ssat = 0.0 if self.l_ssat is None else self.l_ssat.detach().item()
        return LossBreakdown(self.loss.detach().item(), self.l_reg.detach().item(), ssat,
                             self.masked_patch_count)


def _as_batch(images) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(images, dtype=np.float64) if not isinstance(images, torch.Tensor)
                        else images, dtype=DTYPE)
    return x[None] if x.ndim == 2 else x


def first_nonfinite_param(params: ModelParams) -> Optional[str]:
    for name, _ in param_layout(params.config):
        if not torch.isfinite(params.tensors[name]).all():
            return name
    return None


def forward(params: ModelParams, images, masked_idx=None, mode: Mode = Mode.JOINT,
            labels=None, alpha: Optional[float] = None,
            tensors: Optional[dict[str, torch.Tensor]] = None) -> ForwardResult:
    """Run one or both branches.

    ``labels`` are in standardized units. ``prediction`` is standardized as
    well; :func:`predict_months` undoes the scaling. The loss is
    ``alpha * l_reg + (1 - alpha) * l_ssat`` in joint mode and ``l_reg``
    in regression-only mode.
    """
    cfg = params.config
    p = params.tensors if tensors is None else tensors
    bad = first_nonfinite_param(params) if tensors is None else None
    if bad is not None:
        raise NonFiniteError(f"parameter {bad!r} holds non-finite values")
    x = _as_batch(images)
    if tuple(x.shape[-2:]) != tuple(cfg.img_size):
        raise ValueError(f"image size {tuple(x.shape[-2:])} does not match config {cfg.img_size}")
    patches = patchify(x, cfg.patch)
    pred = regression_head(p, encode(p, patches, cfg))
    alpha = cfg.alpha if alpha is None else alpha

    l_reg = None
    if labels is not None:
        y = torch.as_tensor(labels, dtype=DTYPE).reshape(-1)
        l_reg = ((pred - y) ** 2).mean()
    if mode is Mode.REGRESSION_ONLY:
        return ForwardResult(pred, None, l_reg, l_reg, None)

    if masked_idx is None:
        raise ValueError("joint mode needs masked patch indices")
    masked = torch.as_tensor(np.asarray(masked_idx), dtype=torch.long)
    if masked.ndim == 1:
        masked = masked[None].expand(x.shape[0], -1)
    keep = _complement(masked, cfg.n_tokens)
    recon = decode(p, encode(p, patches, cfg, keep), keep, cfg)
    l_ssat = ssat_loss(recon, patches, masked)
    total = None
    if l_reg is not None:
        total = alpha * l_reg + (1 - alpha) * l_ssat
    return ForwardResult(pred, recon, total, l_reg, l_ssat, int(masked.shape[1]))


def _complement(masked: torch.Tensor, n: int) -> torch.Tensor:
    flags = torch.ones(masked.shape[0], n, dtype=torch.bool)
    flags.scatter_(1, masked, False)
    return torch.stack([torch.nonzero(row).reshape(-1) for row in flags])


def gradients(params: ModelParams, images, labels, masked_idx=None, mode: Mode = Mode.JOINT,
              alpha: Optional[float] = None) -> tuple[dict[str, torch.Tensor], ForwardResult]:
    """Exact reverse-mode gradients of the mean batch loss for every parameter."""
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.tensors.items()}
    bad = first_nonfinite_param(params)
    if bad is not None:
        raise NonFiniteError(f"parameter {bad!r} holds non-finite values")
    res = forward(params, images, masked_idx, mode, labels, alpha, tensors=leaves)
    if not torch.isfinite(res.loss):
        raise NonFiniteError("loss is not finite")
    names = list(leaves)
    grads = torch.autograd.grad(res.loss, [leaves[n] for n in names], allow_unused=True)
    out = {n: (torch.zeros_like(leaves[n]) if g is None else g.detach()) for n, g in zip(names, grads)}
    return out, res


def predict_months(params: ModelParams, images, batch_size: int = 256) -> np.ndarray:
    """Regression branch only, de-standardized to months."""
    x = _as_batch(images)
    out = []
    with torch.no_grad():
        for i in range(0, x.shape[0], batch_size):
            out.append(forward(params, x[i:i + batch_size], mode=Mode.REGRESSION_ONLY).prediction)
    pred = torch.cat(out).numpy() if out else np.zeros(0)
    return pred * params.label_std + params.label_mean


# -- MDCK checkpoint --------------------------------------------------------

MAGIC_CHECKPOINT = b"MDCK"


class CheckpointError(ValueError):
    pass


def _write_entries(fh, entries: list[tuple[str, torch.Tensor]]):
    fh.write(struct.pack("<Q", len(entries)))
    for name, t in entries:
        raw = name.encode()
        arr = t.detach().cpu().numpy().astype("<f8")
        fh.write(struct.pack("<I", len(raw)) + raw)
        fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes())


def _read_exact(fh, n):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("checkpoint truncated")
    return buf


def _read_entries(fh) -> dict[str, torch.Tensor]:
    (count,) = struct.unpack("<Q", _read_exact(fh, 8))
    out = {}
    for _ in range(count):
        (ln,) = struct.unpack("<I", _read_exact(fh, 4))
        name = _read_exact(fh, ln).decode()
        (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
        dims = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim))
        n = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(_read_exact(fh, 8 * n), dtype="<f8").reshape(dims)
        out[name] = torch.from_numpy(arr.astype(np.float64))
    return out


def save_checkpoint(path, params: ModelParams, optim_state=None) -> None:
    meta = {"config": params.config.to_dict(), "label_mean": params.label_mean,
            "label_std": params.label_std}
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC_CHECKPOINT)
        fh.write(struct.pack("<Q", len(blob)) + blob)
        _write_entries(fh, [(n, params.tensors[n]) for n, _ in param_layout(params.config)])
        if optim_state is None:
            fh.write(struct.pack("<Q", 0))
        else:
            fh.write(struct.pack("<Q", optim_state.step))
            names = [n for n, _ in param_layout(params.config)]
            _write_entries(fh, [(f"m/{n}", optim_state.m[n]) for n in names]
                           + [(f"v/{n}", optim_state.v[n]) for n in names])


def load_checkpoint(path, expect: Optional[ModelConfig] = None):
    """Returns (ModelParams, step, moments dict or None)."""
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC_CHECKPOINT:
            raise CheckpointError(f"{path}: not an MDCK checkpoint")
        (ln,) = struct.unpack("<Q", _read_exact(fh, 8))
        meta = json.loads(_read_exact(fh, ln))
        cfg = ModelConfig.from_dict(meta["config"])
        if expect is not None and expect != cfg:
            raise CheckpointError(f"checkpoint config {cfg} does not match requested {expect}")
        tensors = _read_entries(fh)
        params = ModelParams(cfg, tensors, meta["label_mean"], meta["label_std"])
        params.validate()
        (step,) = struct.unpack("<Q", _read_exact(fh, 8))
        moments = _read_entries(fh) if step else None
    return params, step, moments


def config_fields() -> list[str]:
    return [f.name for f in fields(ModelConfig)]
