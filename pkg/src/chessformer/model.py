"""Square-token encoder with pluggable attention position encodings and from-to policy head."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import autograd as ag
from . import board as cb

POSENCS = ("absolute", "relative2d", "gab", "gab_pooled")
MODES = ("human", "engine")
MAX_RATING = 5000.0
ENGINE_CONSTANT_PLANES = 8  # 4 castling + black-to-move + rule50 + the 0/1 edge relics


@dataclass
class ModelConfig:
    layers: int = 8
    embed_dim: int = 256
    head_dim: int = 32
    mlp_expansion: float = 2.0
    history: int = 7
    mode: str = "human"
    posenc: str = "gab"
    gab_d1: int = 32
    gab_d2: int = 64
    gab_d3: int = 64
    rating_dim: int = 128
    value_hidden: int = 128

    def __post_init__(self):
        if self.embed_dim % self.head_dim:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by head_dim {self.head_dim}")
        if self.posenc not in POSENCS:
            raise ValueError(f"posenc must be one of {POSENCS}, got {self.posenc!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.posenc.startswith("gab") and min(self.gab_d1, self.gab_d2, self.gab_d3) <= 0:
            raise ValueError("GAB dimensions must be positive")
        if self.history < 0 or self.layers < 1:
            raise ValueError("history must be >= 0 and layers >= 1")

    @property
    def heads(self) -> int:
        return self.embed_dim // self.head_dim

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_expansion))

    @property
    def board_depth(self) -> int:
        return 12 * (self.history + 1)

    @property
    def input_depth(self) -> int:
        if self.mode == "human":
            return self.board_depth + 2 * self.rating_dim
        return self.board_depth + (self.history + 1) + ENGINE_CONSTANT_PLANES

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in sorted(asdict(self).items()))

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, value in values.items():
            if key not in kinds:
                continue
            kind = kinds[key]
            if kind in ("int", int):
                out[key] = int(value)
            elif kind in ("float", float):
                out[key] = float(value)
            else:
                out[key] = str(value)
        return cls(**out)

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        pairs = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        return cls.from_dict(pairs)


@dataclass
class LayerTrace:
    bias: torch.Tensor        # (B, h, 64, 64) positional bias, zeros for absolute encoding
    dpa_logits: torch.Tensor  # (B, h, 64, 64) scaled q.k before the bias
    weights: torch.Tensor     # (B, h, 64, 64) softmax(dpa_logits + bias)

    @property
    def gab_bias(self) -> torch.Tensor:
        return self.bias


class ModelOutput(NamedTuple):
    policy: torch.Tensor   # (B, POLICY_SIZE) flat from-to + promotion logits
    value: torch.Tensor    # (B, 3) win/draw/loss logits for the mover
    trace: list[LayerTrace] | None = None


@dataclass
class PolicyLogits:
    """Move scores for one position in the mover's frame."""

    flat: torch.Tensor

    @property
    def base(self) -> torch.Tensor:
        return self.flat[: cb.NUM_BASE_MOVES].view(64, 64)

    @property
    def promo(self) -> torch.Tensor:
        return self.flat[cb.NUM_BASE_MOVES:].view(len(cb.PROMOTION_PAIRS), 4)

    def score(self, move) -> torch.Tensor:
        return self.flat[cb.move_to_index(move)]


@dataclass
class ValueLogits:
    logits: torch.Tensor

    def probabilities(self) -> torch.Tensor:
        return torch.softmax(self.logits, -1)

    def expected_score(self) -> float:
        p = self.probabilities()
        return float(p[0] + 0.5 * p[1])


def _square_coords():
    sq = torch.arange(64)
    return sq // 8, sq % 8


class GeometricAttentionBias(nn.Module):
    """Per-layer generator of head-specific 64x64 attention biases.

    Board tokens are compressed (projection+flatten, or mean pooling), mapped
    to ``h * d3`` template coefficients, and mixed through the model-wide
    ``posenc_weight`` (4096 x d3) passed in at call time.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.heads = cfg.heads
        self.d3 = cfg.gab_d3
        self.pooled = cfg.posenc == "gab_pooled"
        d = cfg.embed_dim
        if self.pooled:
            self.sm2 = nn.Linear(d, cfg.gab_d2)
        else:
            self.sm1 = nn.Linear(d, cfg.gab_d1)
            self.sm2 = nn.Linear(64 * cfg.gab_d1, cfg.gab_d2)
        self.ln1 = nn.LayerNorm(cfg.gab_d2)
        self.sm3 = nn.Linear(cfg.gab_d2, cfg.heads * cfg.gab_d3)
        self.ln2 = nn.LayerNorm(cfg.heads * cfg.gab_d3)

    def forward(self, x: torch.Tensor, posenc_weight: torch.Tensor) -> torch.Tensor:
        b = x.shape[0]
        if self.pooled:
            y = x.mean(dim=1)
        else:
            y = self.sm1(x).reshape(b, -1)
        y = self.ln1(ag.gelu(self.sm2(y)))
        y = self.ln2(ag.gelu(self.sm3(y))).view(b, self.heads, self.d3)
        return (y @ posenc_weight.T).view(b, self.heads, 64, 64)


class RelativeBias2D(nn.Module):
    """Static bias indexed by (rank, file) displacement: 15 x 15 entries per head."""

    def __init__(self, heads: int):
        super().__init__()
        self.table = nn.Parameter(torch.zeros(heads, 15, 15))
        rank, file = _square_coords()
        dr = rank[None, :] - rank[:, None] + 7  # [query, key]
        df = file[None, :] - file[:, None] + 7
        self.register_buffer("index", (dr * 15 + df).reshape(-1), persistent=False)

    def forward(self) -> torch.Tensor:
        h = self.table.shape[0]
        return self.table.view(h, 225)[:, self.index].view(h, 64, 64)


class EncoderBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.heads, self.head_dim = cfg.heads, cfg.head_dim
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, cfg.mlp_dim)
        self.fc2 = nn.Linear(cfg.mlp_dim, d)
        self.gab = GeometricAttentionBias(cfg) if cfg.posenc.startswith("gab") else None
        self.rel = RelativeBias2D(cfg.heads) if cfg.posenc == "relative2d" else None

    def forward(self, x, posenc_weight=None, trace=None, capture=None):
        b = x.shape[0]
        h = self.ln1(x)
        q, k, v = self.qkv(h).view(b, 64, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        dpa = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if self.gab is not None:
            bias = self.gab(h, posenc_weight)
        elif self.rel is not None:
            bias = self.rel().unsqueeze(0)
        else:
            bias = None
        logits = dpa if bias is None else dpa + bias
        weights = torch.softmax(logits, dim=-1)
        if trace is not None:
            zero = torch.zeros_like(dpa)
            trace.append(LayerTrace(
                bias=(zero if bias is None else bias.expand_as(dpa)).detach(),
                dpa_logits=dpa.detach(),
                weights=weights.detach(),
            ))
        mixed = (weights @ v).transpose(1, 2).reshape(b, 64, -1)
        x = x + self.out(mixed)
        mlp_out = self.fc2(ag.gelu(self.fc1(self.ln2(x))))
        if capture is not None:
            capture.append((x, mlp_out))
        return x + mlp_out


class Chessformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.input_proj = nn.Linear(cfg.input_depth, d)
        if cfg.mode == "human":
            self.rating_weak = nn.Parameter(torch.zeros(cfg.rating_dim))
            self.rating_strong = nn.Parameter(torch.zeros(cfg.rating_dim))
        if cfg.posenc == "absolute":
            self.abs_pos = nn.Parameter(torch.zeros(64, d))
        if cfg.posenc.startswith("gab"):
            # one template bank shared by every layer
            self.posenc_weight = nn.Parameter(torch.zeros(64 * 64, cfg.gab_d3))
        self.blocks = nn.ModuleList(EncoderBlock(cfg) for _ in range(cfg.layers))
        self.final_ln = nn.LayerNorm(d)
        self.policy_q = nn.Linear(d, d)
        self.policy_k = nn.Linear(d, d)
        self.promo_proj = nn.Linear(d, 4)
        self.value_ln = nn.LayerNorm(d)
        self.value_fc1 = nn.Linear(d, cfg.value_hidden)
        self.value_fc2 = nn.Linear(cfg.value_hidden, 3)
        from_sq = torch.tensor([48 + f for f, _ in cb.PROMOTION_PAIRS])
        to_file = torch.tensor([t for _, t in cb.PROMOTION_PAIRS])
        self.register_buffer("promo_from", from_sq, persistent=False)
        self.register_buffer("promo_to_file", to_file, persistent=False)
        self.reset_parameters()

    def reset_parameters(self, std: float = 0.02) -> None:
        def normal_(p):
            nn.init.trunc_normal_(p, std=std, a=-2 * std, b=2 * std)

        for m in self.modules():
            if isinstance(m, nn.Linear):
                normal_(m.weight)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
            elif isinstance(m, RelativeBias2D):
                nn.init.zeros_(m.table)
        for name in ("rating_weak", "rating_strong", "abs_pos"):
            if hasattr(self, name):
                normal_(getattr(self, name))
        if hasattr(self, "posenc_weight"):
            # GAB contributes nothing until trained
            nn.init.zeros_(self.posenc_weight)

    # -- inputs -------------------------------------------------------------

    def rating_embedding(self, rating: torch.Tensor) -> torch.Tensor:
        """Linear blend of the weak (rating 0) and strong (rating 5000) embeddings."""
        k = rating.to(self.rating_weak.dtype).clamp(0.0, MAX_RATING)
        gamma = ((MAX_RATING - k) / MAX_RATING).unsqueeze(-1)
        return gamma * self.rating_weak + (1 - gamma) * self.rating_strong

    def board_planes(self, boards: torch.Tensor) -> torch.Tensor:
        """(B, n+1, 64) plane codes -> (B, 64, 12(n+1)) with slot 0 (current) first."""
        b, slots, _ = boards.shape
        onehot = F.one_hot(boards + 1, 13)[..., 1:].to(self.input_proj.weight.dtype)
        return onehot.permute(0, 2, 1, 3).reshape(b, 64, slots * 12)

    def assemble_input(self, boards, ratings=None, aux=None) -> torch.Tensor:
        """Per-token input features, (B, 64, input_depth)."""
        cfg = self.cfg
        if boards.shape[1] != cfg.history + 1:
            raise ValueError(f"history stack has {boards.shape[1]} boards, model expects {cfg.history + 1}")
        planes = self.board_planes(boards)
        b = planes.shape[0]
        if cfg.mode == "human":
            emb = torch.cat([self.rating_embedding(ratings[:, 0]), self.rating_embedding(ratings[:, 1])], -1)
            return torch.cat([emb.unsqueeze(1).expand(b, 64, -1), planes], dim=-1)
        extra = aux.to(planes.dtype).unsqueeze(1).expand(b, 64, -1)
        return torch.cat([planes, extra], dim=-1)

    def embed(self, boards, ratings=None, aux=None) -> torch.Tensor:
        """Equivalent to ``input_proj(assemble_input(...))``; the per-position
        rating part is projected once instead of on every token."""
        cfg = self.cfg
        if cfg.mode != "human":
            return self.input_proj(self.assemble_input(boards, ratings, aux))
        if boards.shape[1] != cfg.history + 1:
            raise ValueError(f"history stack has {boards.shape[1]} boards, model expects {cfg.history + 1}")
        w = self.input_proj.weight
        r = 2 * cfg.rating_dim
        emb = torch.cat([self.rating_embedding(ratings[:, 0]), self.rating_embedding(ratings[:, 1])], -1)
        return self.board_planes(boards) @ w[:, r:].T + (emb @ w[:, :r].T + self.input_proj.bias).unsqueeze(1)

    # -- trunk and heads -----------------------------------------------------

    def encode(self, x: torch.Tensor, trace: bool = False, capture: list | None = None):
        """Run the blocks on projected tokens (B, 64, D); returns final-normed tokens."""
        if self.cfg.posenc == "absolute":
            x = x + self.abs_pos
        records = [] if trace else None
        posenc_weight = getattr(self, "posenc_weight", None)
        for block in self.blocks:
            x = block(x, posenc_weight, records, capture)
        return self.final_ln(x), records

    def encoder_forward(self, inputs: torch.Tensor, trace: bool = False):
        return self.encode(self.input_proj(inputs), trace)

    def policy_head(self, tokens: torch.Tensor) -> torch.Tensor:
        q, k = self.policy_q(tokens), self.policy_k(tokens)
        base = q @ k.transpose(-2, -1) / math.sqrt(self.cfg.embed_dim)
        promo_bias = self.promo_proj(k[:, 56:64])                 # (B, 8, 4)
        pair_logits = base[:, self.promo_from, 56 + self.promo_to_file]  # (B, 22)
        promo = pair_logits.unsqueeze(-1) + promo_bias[:, self.promo_to_file]
        return torch.cat([base.flatten(1), promo.flatten(1)], dim=1)

    def value_head(self, tokens: torch.Tensor) -> torch.Tensor:
        pooled = self.value_ln(tokens.mean(dim=1))
        return self.value_fc2(torch.relu(self.value_fc1(pooled)))

    def forward(self, boards, ratings=None, aux=None, trace: bool = False, capture: list | None = None):
        tokens, records = self.encode(self.embed(boards, ratings, aux), trace, capture)
        return ModelOutput(self.policy_head(tokens), self.value_head(tokens), records)

    def run(self, batch, trace: bool = False, capture: list | None = None) -> ModelOutput:
        return self(batch.boards, batch.ratings, batch.aux, trace=trace, capture=capture)


def masked_logits(policy: torch.Tensor, legal_mask: torch.Tensor) -> torch.Tensor:
    return policy.masked_fill(~legal_mask, float("-inf"))


def masked_policy(logits, legal) -> torch.Tensor:
    """Distribution over ``legal`` (canonical moves or policy indices), in that order."""
    legal = list(legal)
    if not legal:
        raise ValueError("no legal moves")
    flat = logits.flat if isinstance(logits, PolicyLogits) else logits
    idx = torch.tensor([m if isinstance(m, int) else cb.move_to_index(m) for m in legal])
    return torch.softmax(flat[idx], dim=-1)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def count_flops(cfg: ModelConfig) -> int:
    """Forward FLOPs for one position, counting 2 per multiply-accumulate in matmuls.

    input projection  2*64*in*D
    per layer         QKV+out 2*64*4*D^2, logits+mixing 2*2*64*64*D,
                      MLP 2*2*64*D*mlp
    GAB per layer     full:   2*(64*D*d1 + 64*d1*d2 + d2*h*d3 + h*d3*4096)
                      pooled: 64*D (mean) + 2*(D*d2 + d2*h*d3 + h*d3*4096)
    heads             policy 2*(2*64*D^2 + 64*64*D + 8*D*4), value 2*(D*vh + vh*3)
    Bias additions, norms and activations are not counted.
    """
    d, h, t = cfg.embed_dim, cfg.heads, 64
    flops = 2 * t * cfg.input_depth * d
    layer = 2 * t * 4 * d * d + 2 * 2 * t * t * d + 2 * 2 * t * d * cfg.mlp_dim
    if cfg.posenc == "gab":
        layer += 2 * (t * d * cfg.gab_d1 + t * cfg.gab_d1 * cfg.gab_d2
                      + cfg.gab_d2 * h * cfg.gab_d3 + h * cfg.gab_d3 * t * t)
    elif cfg.posenc == "gab_pooled":
        layer += t * d + 2 * (d * cfg.gab_d2 + cfg.gab_d2 * h * cfg.gab_d3 + h * cfg.gab_d3 * t * t)
    flops += cfg.layers * layer
    flops += 2 * (2 * t * d * d + t * t * d + 8 * d * 4)
    flops += 2 * (d * cfg.value_hidden + cfg.value_hidden * 3)
    return flops
