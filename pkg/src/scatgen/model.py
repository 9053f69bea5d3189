"""Feature-grid -> scatterer-grid network with a frozen transformer backbone and LoRA adapters."""

from __future__ import annotations

import contextlib
import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

LORA_TARGETS = ("attn_query", "attn_value", "ffn_in")
VARIANTS = ("full", "no_patching", "no_positional", "no_llm")
FREQ_NORMALIZER = 3e10  # Hz; keeps the frequency scalar O(1)


@dataclass
class ModelConfig:
    m_x: int = 80
    m_y: int = 80
    patch: int = 8
    dim: int = 64
    depth: int = 6
    n_x: int = 10
    n_y: int = 10
    channels: int = 3
    heads: int = 4
    mlp_ratio: int = 4
    lora_rank: int = 4
    lora_alpha: float = 8.0
    lora_targets: tuple[str, ...] = LORA_TARGETS
    variant: str = "full"
    seed: int = 0
    backbone_seed: int = 0

    def __post_init__(self):
        self.lora_targets = tuple(self.lora_targets)
        q = self.patch
        if q < 1 or self.m_x < 1 or self.m_y < 1:
            raise ValueError("grid and patch sizes must be positive")
        if self.m_x % q or self.m_y % q:
            raise ValueError(f"grid {self.m_x}x{self.m_y} is not divisible into {q}x{q} patches")
        if self.n_tokens != self.n_x * self.n_y:
            raise ValueError(
                f"token count N = m_x*m_y/Q^2 = {self.n_tokens} must equal n_x*n_y = {self.n_x * self.n_y}"
            )
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        if self.lora_rank < 1:
            raise ValueError("lora_rank must be >= 1")
        if self.dim % self.heads or self.dim % 2:
            raise ValueError("dim must be even and divisible by heads")
        bad = set(self.lora_targets) - set(LORA_TARGETS)
        if bad:
            raise ValueError(f"unknown LoRA targets {sorted(bad)}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")

    @property
    def n_tokens(self) -> int:
        return (self.m_x * self.m_y) // (self.patch * self.patch)

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        """Pre-trained-shape configuration (GPT-2 small width, first six layers)."""
        base = dict(dim=768, heads=12, depth=6)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lora_targets"] = list(self.lora_targets)
        return d


@dataclass
class PatchSequence:
    tokens: torch.Tensor  # (B, T, D)
    positional: bool = False
    frequency: bool = False


def _reset_linear(layer: nn.Module, g: torch.Generator):
    nn.init.kaiming_uniform_(layer.weight, a=math.sqrt(5), generator=g)
    if layer.bias is not None:
        fan_in = layer.weight[0].numel()
        bound = 1.0 / math.sqrt(fan_in)
        nn.init.uniform_(layer.bias, -bound, bound, generator=g)


class LoRALinear(nn.Module):
    """Frozen linear map plus a trainable low-rank update: y = W x + b + (alpha / r) * up(down(x))."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float, g: torch.Generator | None = None):
        super().__init__()
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.rank = rank
        self.scale = alpha / rank
        self.down = nn.Parameter(torch.empty(rank, base.in_features))
        self.up = nn.Parameter(torch.zeros(base.out_features, rank))
        nn.init.kaiming_uniform_(self.down, a=math.sqrt(5), generator=g)
        self.enabled = True

    def forward(self, x):
        y = self.base(x)
        if self.enabled:
            y = y + self.scale * F.linear(F.linear(x, self.down), self.up)
        return y


class Block(nn.Module):
    """Pre-norm transformer block with bidirectional multi-head attention."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.heads = heads
        self.ln_1 = nn.LayerNorm(dim)
        self.attn_query = nn.Linear(dim, dim)
        self.attn_key = nn.Linear(dim, dim)
        self.attn_value = nn.Linear(dim, dim)
        self.attn_out = nn.Linear(dim, dim)
        self.ln_2 = nn.LayerNorm(dim)
        self.ffn_in = nn.Linear(dim, mlp_ratio * dim)
        self.ffn_out = nn.Linear(mlp_ratio * dim, dim)

    def attention(self, x):
        B, T, D = x.shape
        h = self.heads

        def split(t):
            return t.view(B, T, h, D // h).transpose(1, 2)

        q, k, v = split(self.attn_query(x)), split(self.attn_key(x)), split(self.attn_value(x))
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(D // h), dim=-1)
        out = (att @ v).transpose(1, 2).reshape(B, T, D)
        return self.attn_out(out)

    def forward(self, x):
        x = x + self.attention(self.ln_1(x))
        x = x + self.ffn_out(F.gelu(self.ffn_in(self.ln_2(x)), approximate="tanh"))
        return x


class ScattererNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        g = torch.Generator().manual_seed(cfg.seed)
        C, D, Q, N = cfg.channels, cfg.dim, cfg.patch, cfg.n_tokens

        self.register_buffer("feature_scale", torch.ones(C))
        if cfg.variant == "no_patching":
            self.patch_conv = nn.Conv2d(C, C, kernel_size=1)
            self.token_proj = nn.Linear(C, D)
        else:
            self.patch_conv = nn.Conv2d(C, Q * Q * C, kernel_size=Q, stride=Q)
            self.token_proj = nn.Linear(Q * Q * C, D)
        if cfg.variant == "no_positional":
            self.register_buffer("positional", torch.zeros(N, 1))
        else:
            self.positional = nn.Parameter(torch.empty(N, 1))
            nn.init.normal_(self.positional, 0.0, 0.02, generator=g)
        self.freq_in = nn.Linear(1, D // 2)
        self.freq_out = nn.Linear(D // 2, D)
        self.head_in = nn.Conv2d(D, D // 2, kernel_size=1)
        self.head_out = nn.Conv2d(D // 2, 1, kernel_size=1)
        for layer in (self.patch_conv, self.token_proj, self.freq_in, self.freq_out, self.head_in, self.head_out):
            _reset_linear(layer, g)

        depth = 0 if cfg.variant == "no_llm" else cfg.depth
        self.blocks = nn.ModuleList(Block(D, cfg.heads, cfg.mlp_ratio) for _ in range(depth))
        self._init_backbone(torch.Generator().manual_seed(cfg.backbone_seed))
        for name, base in self.backbone_parameters().items():
            base.requires_grad_(False)
        self.adapters = nn.ModuleDict()
        for i, block in enumerate(self.blocks):
            for target in cfg.lora_targets:
                wrapped = LoRALinear(getattr(block, target), cfg.lora_rank, cfg.lora_alpha, g)
                setattr(block, target, wrapped)
                self.adapters[f"{i}_{target}"] = wrapped

    # ------------------------------------------------------------------ backbone weights

    def _init_backbone(self, g: torch.Generator):
        for block in self.blocks:
            for m in block.modules():
                if isinstance(m, nn.Linear):
                    nn.init.normal_(m.weight, 0.0, 0.02, generator=g)
                    nn.init.zeros_(m.bias)
                elif isinstance(m, nn.LayerNorm):
                    nn.init.ones_(m.weight)
                    nn.init.zeros_(m.bias)

    def backbone_parameters(self) -> dict[str, torch.Tensor]:
        """Frozen base weights of the transformer blocks, keyed without adapter indirection."""
        out = {}
        for name, p in self.blocks.named_parameters():
            if ".down" in name or ".up" in name:
                continue
            out[name.replace(".base.", ".")] = p
        return out

    def backbone_digest(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.backbone_parameters().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.detach().cpu().numpy()).tobytes())
        return h.hexdigest()

    def load_backbone_weights(self, state: Mapping[str, np.ndarray | torch.Tensor]):
        """Copy externally obtained weights (our naming, see ``backbone_parameters``) into the frozen stack."""
        params = self.backbone_parameters()
        missing = sorted(set(params) - set(state))
        if missing:
            raise KeyError(f"missing backbone weights: {missing[:5]}{'...' if len(missing) > 5 else ''}")
        with torch.no_grad():
            for name, p in params.items():
                src = torch.as_tensor(np.asarray(state[name]), dtype=p.dtype)
                if src.shape != p.shape:
                    raise ValueError(f"shape mismatch for {name}: {tuple(src.shape)} vs {tuple(p.shape)}")
                p.copy_(src)

    @contextlib.contextmanager
    def adapters_disabled(self):
        for a in self.adapters.values():
            a.enabled = False
        try:
            yield self
        finally:
            for a in self.adapters.values():
                a.enabled = True

    def set_feature_scale(self, scale):
        scale = torch.as_tensor(np.asarray(scale), dtype=self.feature_scale.dtype)
        if scale.shape != self.feature_scale.shape or not torch.all(scale > 0):
            raise ValueError("feature scale must be a positive per-channel vector")
        self.feature_scale.copy_(scale)

    # ------------------------------------------------------------------ pipeline stages

    def patch_embed(self, features: torch.Tensor) -> PatchSequence:
        cfg = self.cfg
        if features.shape[1:] != (cfg.channels, cfg.m_x, cfg.m_y):
            raise ValueError(
                f"feature grid shape {tuple(features.shape[1:])} does not match "
                f"({cfg.channels}, {cfg.m_x}, {cfg.m_y})"
            )
        x = features / self.feature_scale.view(1, -1, 1, 1)
        x = self.patch_conv(x)
        if cfg.variant == "no_patching":
            x = self.token_proj(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
            x = F.avg_pool2d(x, cfg.patch)
            return PatchSequence(x.flatten(2).transpose(1, 2))
        # (B, Q*Q*C, m_x/Q, m_y/Q) -> (B, N, Q*Q*C), row-major over the patch lattice
        return PatchSequence(self.token_proj(x.flatten(2).transpose(1, 2)))

    def add_positional(self, seq: PatchSequence) -> PatchSequence:
        if seq.positional:
            raise ValueError("positional encoding already applied")
        if seq.frequency or seq.tokens.shape[1] != self.cfg.n_tokens:
            raise ValueError("positional encoding applies to the N patch tokens only")
        return PatchSequence(seq.tokens + self.positional.unsqueeze(0), positional=True)

    def frequency_token(self, f_c: torch.Tensor) -> torch.Tensor:
        f = f_c.reshape(-1, 1).to(self.freq_in.weight.dtype) / FREQ_NORMALIZER
        return self.freq_out(F.leaky_relu(self.freq_in(f), 0.01))

    def append_frequency(self, seq: PatchSequence, f_c) -> PatchSequence:
        if seq.frequency:
            raise ValueError("frequency token already appended")
        f_c = torch.as_tensor(f_c, dtype=seq.tokens.dtype).reshape(-1)
        if torch.any(f_c <= 0):
            raise ValueError("carrier frequency must be positive")
        if f_c.numel() == 1 and seq.tokens.shape[0] > 1:
            f_c = f_c.expand(seq.tokens.shape[0])
        tok = self.frequency_token(f_c).unsqueeze(1)
        return PatchSequence(torch.cat([seq.tokens, tok], dim=1), seq.positional, True)

    def backbone_forward(self, tokens: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            tokens = block(tokens)
        return tokens

    def output_head(self, features: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        B, T, D = features.shape
        if T != cfg.n_x * cfg.n_y + 1:
            raise ValueError(f"expected {cfg.n_x * cfg.n_y + 1} tokens (N + frequency), got {T}")
        grid = features[:, :-1, :].transpose(1, 2).reshape(B, D, cfg.n_x, cfg.n_y)
        out = self.head_out(F.leaky_relu(self.head_in(grid), 0.01))
        return out[:, 0]

    def forward(self, features: torch.Tensor, f_c: torch.Tensor) -> torch.Tensor:
        seq = self.add_positional(self.patch_embed(features))
        seq = self.append_frequency(seq, f_c)
        return self.output_head(self.backbone_forward(seq.tokens))


def count_parameters(model: nn.Module) -> tuple[int, int]:
    """(total, trainable) parameter counts; frozen backbone weights count toward total only."""
    total = sum(p.numel() for p in model.parameters())
    trainable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    return total, trainable


def gpt2_to_backbone(state: Mapping[str, np.ndarray], depth: int) -> dict[str, np.ndarray]:
    """Map a GPT-2 style state dict (fused ``c_attn``, Conv1D layout) onto our block naming."""
    def get(key):
        for prefix in ("", "transformer."):
            if prefix + key in state:
                return np.asarray(state[prefix + key])
        raise KeyError(key)

    out = {}
    for i in range(depth):
        h = f"h.{i}."
        w_qkv, b_qkv = get(h + "attn.c_attn.weight"), get(h + "attn.c_attn.bias")
        D = w_qkv.shape[0]
        for j, name in enumerate(("attn_query", "attn_key", "attn_value")):
            out[f"{i}.{name}.weight"] = w_qkv[:, j * D:(j + 1) * D].T.copy()
            out[f"{i}.{name}.bias"] = b_qkv[j * D:(j + 1) * D].copy()
        out[f"{i}.attn_out.weight"] = get(h + "attn.c_proj.weight").T.copy()
        out[f"{i}.attn_out.bias"] = get(h + "attn.c_proj.bias")
        out[f"{i}.ffn_in.weight"] = get(h + "mlp.c_fc.weight").T.copy()
        out[f"{i}.ffn_in.bias"] = get(h + "mlp.c_fc.bias")
        out[f"{i}.ffn_out.weight"] = get(h + "mlp.c_proj.weight").T.copy()
        out[f"{i}.ffn_out.bias"] = get(h + "mlp.c_proj.bias")
        for ln in ("ln_1", "ln_2"):
            out[f"{i}.{ln}.weight"] = get(h + f"{ln}.weight")
            out[f"{i}.{ln}.bias"] = get(h + f"{ln}.bias")
    return out
