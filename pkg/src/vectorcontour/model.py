"""Patch-embedding encoder, learnable positional table, MLP projector, decoder LM."""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    vocab_size: int
    image_size: int = 128
    patch: int = 16
    channels: int = 1
    enc_layers: int = 2
    enc_dim: int = 128
    enc_heads: int = 4
    lm_layers: int = 4
    lm_dim: int = 128
    lm_heads: int = 4
    max_seq_len: int = 192
    use_pos_embed: bool = True
    dtype: str = "float32"
    img_id: int = 0
    bos_id: int = 1
    eos_id: int = 2
    pad_id: int = 3
    coord_start_id: int | None = None
    answer_pos_base: int = 24

    def __post_init__(self):
        if self.image_size % self.patch != 0:
            raise ValueError("image_size must be divisible by patch")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]


class Block(nn.Module):
    """Pre-norm transformer block with optional additive attention bias."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x: torch.Tensor, attn_bias: torch.Tensor | None = None) -> torch.Tensor:
        b, s, d = x.shape
        h = self.norm1(x)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        q = q.view(b, s, self.heads, d // self.heads).transpose(1, 2)
        k = k.view(b, s, self.heads, d // self.heads).transpose(1, 2)
        v = v.view(b, s, self.heads, d // self.heads).transpose(1, 2)
        att = q @ k.transpose(-2, -1) / math.sqrt(d // self.heads)
        if attn_bias is not None:
            att = att + attn_bias
        att = att.softmax(dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, s, d)
        x = x + self.proj(out)
        x = x + self.mlp(self.norm2(x))
        return x


class ContourModel(nn.Module):
    """Vision tokens attend bidirectionally among themselves, causally after.

    Text tokens get learned absolute positions starting at 0 for the first
    text token; vision tokens carry position only through the learnable
    vision positional table (when enabled).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Conv2d(cfg.channels, cfg.enc_dim, cfg.patch, stride=cfg.patch)
        self.enc_blocks = nn.ModuleList(Block(cfg.enc_dim, cfg.enc_heads)
                                        for _ in range(cfg.enc_layers))
        self.enc_norm = nn.LayerNorm(cfg.enc_dim)
        if cfg.use_pos_embed:
            self.pos_embed = nn.Parameter(torch.zeros(cfg.n_patches, cfg.enc_dim))
        else:
            self.pos_embed = None
        self.proj_fc1 = nn.Linear(cfg.enc_dim, cfg.lm_dim)
        self.proj_fc2 = nn.Linear(cfg.lm_dim, cfg.lm_dim)
        self.tok_embed = nn.Embedding(cfg.vocab_size, cfg.lm_dim)
        self.text_pos = nn.Embedding(cfg.max_seq_len, cfg.lm_dim)
        self.lm_blocks = nn.ModuleList(Block(cfg.lm_dim, cfg.lm_heads)
                                       for _ in range(cfg.lm_layers))
        self.lm_norm = nn.LayerNorm(cfg.lm_dim)
        self.head = nn.Linear(cfg.lm_dim, cfg.vocab_size, bias=False)
        self._init_weights()
        if cfg.torch_dtype != torch.float32:
            self.to(cfg.torch_dtype)

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d)):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Embedding):
                nn.init.trunc_normal_(m.weight, std=0.02)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """Named groups matching the stage freezing schedules."""
        groups = {
            "encoder": list(self.patch_embed.parameters())
                       + list(self.enc_blocks.parameters())
                       + list(self.enc_norm.parameters()),
            "pos_embed": [self.pos_embed] if self.pos_embed is not None else [],
            "projector": list(self.proj_fc1.parameters()) + list(self.proj_fc2.parameters()),
            "lm": list(self.tok_embed.parameters()) + list(self.text_pos.parameters())
                  + list(self.lm_blocks.parameters()) + list(self.lm_norm.parameters())
                  + list(self.head.parameters()),
        }
        return groups

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        """images: (B, C, H, W) in [0, 1] -> (B, n_patches, enc_dim)."""
        if images.dim() == 3:
            images = images.unsqueeze(1)
        if images.shape[-2:] != (self.cfg.image_size, self.cfg.image_size):
            raise ValueError(f"expected {self.cfg.image_size}x{self.cfg.image_size} images, "
                             f"got {tuple(images.shape[-2:])}")
        x = self.patch_embed(images.to(self.cfg.torch_dtype))
        x = x.flatten(2).transpose(1, 2)
        for blk in self.enc_blocks:
            x = blk(x)
        x = self.enc_norm(x)
        if self.pos_embed is not None:
            x = x + self.pos_embed
        return x

    def project(self, features: torch.Tensor) -> torch.Tensor:
        return self.proj_fc2(F.gelu(self.proj_fc1(features)))

    def _text_positions(self, t_ids: torch.Tensor) -> torch.Tensor:
        """Absolute positions with the answer span anchored at a fixed base.

        Prompt tokens count up from 0. From the first coordinate token onward,
        positions continue from answer_pos_base, so the answer occupies the
        same positional indices whether or not an instruction prompt precedes
        it. Without coord_start_id positions are plain sequence indices.
        """
        b, t = t_ids.shape
        idx = torch.arange(t, device=t_ids.device)
        if self.cfg.coord_start_id is None:
            return idx.expand(b, t)
        is_coord = t_ids >= self.cfg.coord_start_id
        first = torch.where(is_coord.any(dim=1), is_coord.int().argmax(dim=1),
                            torch.full((b,), t, device=t_ids.device))
        rel = idx.unsqueeze(0) - first.unsqueeze(1)
        return torch.where(rel >= 0, self.cfg.answer_pos_base + rel, idx.unsqueeze(0))

    def _attn_bias(self, n_vis: int, total: int, text_ids: torch.Tensor) -> torch.Tensor:
        allowed = torch.tril(torch.ones(total, total, dtype=torch.bool, device=text_ids.device))
        allowed[:n_vis, :n_vis] = True
        bias = torch.zeros(total, total, dtype=self.cfg.torch_dtype, device=text_ids.device)
        bias.masked_fill_(~allowed, float("-inf"))
        bias = bias.expand(text_ids.shape[0], 1, total, total).clone()
        pad = text_ids[:, 1:] == self.cfg.pad_id
        if pad.any():
            key_pad = torch.zeros(text_ids.shape[0], total, dtype=torch.bool,
                                  device=text_ids.device)
            key_pad[:, n_vis:] = pad
            bias.masked_fill_(key_pad[:, None, None, :], float("-inf"))
        return bias

    def forward(self, images: torch.Tensor, text_ids: torch.Tensor) -> torch.Tensor:
        """Splice vision tokens at the [IMG] position; return logits over the spliced sequence.

        text_ids must start with [IMG]. Output shape is (B, n_patches + T - 1, V).
        """
        if not bool((text_ids[:, 0] == self.cfg.img_id).all()):
            raise ValueError("text_ids must start with the [IMG] placeholder")
        n_vis = self.cfg.n_patches
        t = text_ids.shape[1]
        total = n_vis + t - 1
        if total > self.cfg.max_seq_len:
            raise ValueError(f"sequence-overflow: {total} > max_seq_len {self.cfg.max_seq_len}")
        vis = self.project(self.encode_image(images))
        txt = self.tok_embed(text_ids[:, 1:])
        txt = txt + self.text_pos(self._text_positions(text_ids[:, 1:]))
        x = torch.cat([vis, txt], dim=1)
        bias = self._attn_bias(n_vis, total, text_ids)
        for blk in self.lm_blocks:
            x = blk(x, bias)
        return self.head(self.lm_norm(x))

    def text_logits(self, images: torch.Tensor, text_ids: torch.Tensor) -> torch.Tensor:
        """Logits aligned to predict text_ids[:, 1:] (next-token targets)."""
        n_vis = self.cfg.n_patches
        t = text_ids.shape[1]
        logits = self.forward(images, text_ids)
        return logits[:, n_vis - 1: n_vis - 1 + t - 1]

    def sequence_logprob(self, images: torch.Tensor, text_ids: torch.Tensor,
                         answer_mask: torch.Tensor) -> torch.Tensor:
        """Sum of answer-token log-probs under teacher forcing; returns (B,)."""
        logits = self.text_logits(images, text_ids)
        logp = F.log_softmax(logits, dim=-1)
        tgt = text_ids[:, 1:]
        token_lp = logp.gather(-1, tgt.unsqueeze(-1)).squeeze(-1)
        return (token_lp * answer_mask[:, 1:].to(token_lp.dtype)).sum(dim=1)

    @torch.no_grad()
    def generate(self, images: torch.Tensor, prompt_ids: torch.Tensor,
                 max_new: int) -> list[list[int]]:
        """Greedy decoding; per sample truncated at its first [EOS].

        The loop stops once every batch element has emitted [EOS] or the
        budget is spent. Finished rows are fed [PAD], which is attention-masked,
        so batch composition cannot change any row's output.
        """
        if max_new < 1:
            raise ValueError("max_new must be >= 1")
        ids = prompt_ids.clone()
        b = ids.shape[0]
        finished = torch.zeros(b, dtype=torch.bool, device=ids.device)
        outs: list[list[int]] = [[] for _ in range(b)]
        for _ in range(max_new):
            logits = self.forward(images, ids)[:, -1, :]
            nxt = logits.argmax(dim=-1)
            nxt = torch.where(finished, torch.full_like(nxt, self.cfg.pad_id), nxt)
            for i in range(b):
                if not finished[i]:
                    tok = int(nxt[i])
                    outs[i].append(tok)
                    if tok == self.cfg.eos_id:
                        finished[i] = True
            ids = torch.cat([ids, nxt.unsqueeze(1)], dim=1)
            if bool(finished.all()):
                break
        return outs


def nll_loss(logits: torch.Tensor, targets: torch.Tensor, loss_mask: torch.Tensor) -> torch.Tensor:
    """Mean -log softmax(logits)[target] over masked positions."""
    mask = loss_mask.reshape(-1)
    if int(mask.sum()) == 0:
        raise ValueError("empty-loss: no unmasked positions")
    flat = logits.reshape(-1, logits.shape[-1])
    per_tok = F.cross_entropy(flat, targets.reshape(-1), reduction="none")
    return (per_tok * mask.to(per_tok.dtype)).sum() / mask.sum().to(per_tok.dtype)


def save_checkpoint(path, model: ContourModel, extra: dict | None = None) -> None:
    torch.save({
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }, path)


def load_checkpoint(path) -> tuple[ContourModel, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('format_version')}")
    cfg = ModelConfig(**blob["config"])
    model = ContourModel(cfg)
    model.load_state_dict(blob["state_dict"])
    return model, blob.get("extra", {})
