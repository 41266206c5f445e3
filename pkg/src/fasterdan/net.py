"""Convolutional encoder + transformer decoder with incremental key/value caching."""

from __future__ import annotations

import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .posenc import pe_2d


def deterministic_mode() -> bool:
    return os.environ.get("FDAN_DETERMINISTIC", "0") not in ("", "0")


def set_deterministic(enabled: bool = True) -> None:
    torch.use_deterministic_algorithms(enabled)
    if enabled:
        torch.set_num_threads(1)


@dataclass
class ModelConfig:
    vocab_size: int  # |A|, predictable tokens; the embedding table has one more row
    d: int = 64
    layers: int = 2
    heads: int = 4
    ffn: int = 0  # 0 -> 4 * d
    dropout: float = 0.0
    enc_channels: tuple[int, ...] = (16, 32, 64, 64, 64)
    strides: tuple[tuple[int, int], ...] = ((2, 2), (2, 2), (2, 2), (2, 1), (2, 1))

    def __post_init__(self):
        self.enc_channels = tuple(int(c) for c in self.enc_channels)
        self.strides = tuple((int(a), int(b)) for a, b in self.strides)
        if self.ffn == 0:
            self.ffn = 4 * self.d
        if self.d % 4 or self.d % self.heads:
            raise ValueError(f"d={self.d} must be divisible by 4 and by heads={self.heads}")
        if len(self.enc_channels) != len(self.strides):
            raise ValueError("one encoder channel count per stride")

    @property
    def total_stride(self) -> tuple[int, int]:
        return (math.prod(s[0] for s in self.strides), math.prod(s[1] for s in self.strides))


@dataclass
class FeatureGrid:
    f2d: torch.Tensor  # [B, H, W, d]
    f1d: torch.Tensor  # [B, H*W, d], 2D encoding added
    valid: Optional[torch.Tensor] = None  # [B, H*W] bool, False on batch padding


@dataclass
class DecoderCache:
    """Keys/values of every processed query position, per layer, plus the
    cross-attention projections of the image features."""

    layers: int
    keys: list = field(default_factory=list)
    values: list = field(default_factory=list)
    coords: list = field(default_factory=list)
    memory: list = field(default_factory=list)

    def __post_init__(self):
        self.keys = [None] * self.layers
        self.values = [None] * self.layers
        self.memory = [None] * self.layers

    def __len__(self) -> int:
        return len(self.coords)

    def append(self, layer: int, k: torch.Tensor, v: torch.Tensor):
        if self.keys[layer] is None:
            self.keys[layer], self.values[layer] = k, v
        else:
            self.keys[layer] = torch.cat([self.keys[layer], k], dim=2)
            self.values[layer] = torch.cat([self.values[layer], v], dim=2)
        return self.keys[layer], self.values[layer]


class Attention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)

    def split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        return x.view(b, n, self.heads, d // self.heads).transpose(1, 2)

    def attend(self, q, k, v, mask, return_weights=False, dropout=0.0):
        # q [B,h,Q,dh], k/v [B,h,K,dh], mask [B,Q,K] or [B,1,K]
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        scores = scores.masked_fill(~mask[:, None], float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        if dropout and self.training:
            weights = F.dropout(weights, dropout)
        out = (weights @ v).transpose(1, 2).flatten(2)
        out = self.o(out)
        return (out, weights) if return_weights else out


class DecoderLayer(nn.Module):
    """Pre-norm decoder layer: masked self-attention, cross-attention, feed-forward."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d)
        self.self_attn = Attention(cfg.d, cfg.heads)
        self.norm2 = nn.LayerNorm(cfg.d)
        self.cross_attn = Attention(cfg.d, cfg.heads)
        self.norm3 = nn.LayerNorm(cfg.d)
        self.ff1 = nn.Linear(cfg.d, cfg.ffn)
        self.ff2 = nn.Linear(cfg.ffn, cfg.d)
        self.dropout = cfg.dropout

    def forward(self, x, mem_kv, mem_mask, self_mask, cache: Optional[DecoderCache], index: int):
        h = self.norm1(x)
        sa = self.self_attn
        q, k, v = sa.split(sa.q(h)), sa.split(sa.k(h)), sa.split(sa.v(h))
        if cache is not None:
            k, v = cache.append(index, k, v)
        p = self.dropout if self.training else 0.0
        x = x + F.dropout(sa.attend(q, k, v, self_mask, dropout=p), p)
        h = self.norm2(x)
        ca = self.cross_attn
        x = x + F.dropout(ca.attend(ca.split(ca.q(h)), *mem_kv, mem_mask, dropout=p), p)
        h = F.dropout(F.relu(self.ff1(self.norm3(x))), p)
        return x + F.dropout(self.ff2(h), p)


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        convs = []
        c_in = 1
        for c_out, stride in zip(cfg.enc_channels, cfg.strides):
            convs.append(nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1))
            c_in = c_out
        self.convs = nn.ModuleList(convs)
        self.out = nn.Conv2d(c_in, cfg.d, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for conv in self.convs:
            x = F.relu(conv(x))
        return self.out(x)


class Model(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.embedding = nn.Embedding(cfg.vocab_size + 1, cfg.d)
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(cfg.d)
        self.proj = nn.Linear(cfg.d, cfg.vocab_size, bias=False)

    @property
    def dtype(self) -> torch.dtype:
        return self.proj.weight.dtype

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, (nn.Linear, nn.Embedding)):
                    bound = 1.0 / math.sqrt(module.weight.shape[-1])
                    module.weight.uniform_(-bound, bound, generator=gen)
                    if getattr(module, "bias", None) is not None:
                        module.bias.zero_()
                elif isinstance(module, nn.Conv2d):
                    fan_in = module.weight[0].numel()
                    bound = math.sqrt(6.0 / fan_in)
                    module.weight.uniform_(-bound, bound, generator=gen)
                    module.bias.zero_()
                elif isinstance(module, nn.LayerNorm):
                    module.weight.fill_(1.0)
                    module.bias.zero_()

    # encoder side

    def encode_image(self, images: torch.Tensor, sizes: Optional[list] = None) -> FeatureGrid:
        """``images`` [B, H_i, W_i] (or [H_i, W_i]) with ink in [0, 1].

        ``sizes`` lists the unpadded (H_i, W_i) per batch item; feature cells
        beyond them are flagged invalid for cross-attention.
        """
        if images.dim() == 2:
            images = images[None]
        sh, sw = self.cfg.total_stride
        _, h_i, w_i = images.shape
        if h_i % sh or w_i % sw:
            raise ValueError(f"image {h_i}x{w_i} is not a multiple of the encoder stride {sh}x{sw}")
        f = self.encoder(images[:, None].to(self.dtype)).permute(0, 2, 3, 1)
        b, h, w, d = f.shape
        pos = torch.tensor(np.array(pe_2d(h, w, d)), dtype=f.dtype)
        f1d = (f + pos).reshape(b, h * w, d)
        valid = None
        if sizes is not None:
            rows = torch.arange(h)[:, None].expand(h, w).reshape(-1)
            cols = torch.arange(w)[None, :].expand(h, w).reshape(-1)
            valid = torch.stack([(rows < hh // sh) & (cols < ww // sw) for hh, ww in sizes])
        return FeatureGrid(f, f1d, valid)

    def memory_kv(self, features: FeatureGrid, cache: Optional[DecoderCache] = None):
        out = []
        for n, layer in enumerate(self.layers):
            if cache is not None and cache.memory[n] is not None:
                out.append(cache.memory[n])
                continue
            ca = layer.cross_attn
            kv = (ca.split(ca.k(features.f1d)), ca.split(ca.v(features.f1d)))
            if cache is not None:
                cache.memory[n] = kv
            out.append(kv)
        return out

    # decoder side

    def embed(self, tokens: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        tokens = tokens.clamp(max=self.cfg.vocab_size)  # pad rows are masked anyway
        return self.embedding(tokens) + positions.to(self.dtype)

    def decoder_forward(
        self,
        queries: torch.Tensor,
        features: FeatureGrid,
        self_mask: torch.Tensor,
        cache: Optional[DecoderCache] = None,
        coords: Optional[list] = None,
    ) -> torch.Tensor:
        """Run the decoder stack on ``queries`` [B, Q, d].

        ``self_mask`` is [B, Q, K] (or [Q, K]) where K counts cached positions
        followed by the new queries. With a cache, keys/values of the new
        queries are appended and kept for later calls.
        """
        if queries.dim() == 2:
            queries = queries[None]
        if self_mask.dim() == 2:
            self_mask = self_mask[None]
        b, q, _ = queries.shape
        past = len(cache) if cache is not None else 0
        if self_mask.shape[-2:] != (q, past + q):
            raise ValueError(
                f"mask shape {tuple(self_mask.shape[-2:])} does not match {q} queries "
                f"over {past + q} keys"
            )
        mem_kv = self.memory_kv(features, cache)
        if features.valid is None:
            mem_mask = torch.ones(b, 1, features.f1d.shape[1], dtype=torch.bool)
        else:
            mem_mask = features.valid[:, None, :]
        x = queries
        for n, layer in enumerate(self.layers):
            x = layer(x, mem_kv[n], mem_mask, self_mask, cache, n)
        if cache is not None:
            cache.coords.extend(coords if coords is not None else [None] * q)
        return self.norm(x)

    def project_logits(self, outputs: torch.Tensor) -> torch.Tensor:
        return self.proj(outputs)

    def new_cache(self) -> DecoderCache:
        return DecoderCache(self.cfg.layers)


def build_model(cfg: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> Model:
    model = Model(cfg).to(dtype)
    model.reset_parameters(seed)
    return model


def softmax(scores: torch.Tensor) -> torch.Tensor:
    return torch.softmax(scores, dim=-1)


def backward(loss: torch.Tensor) -> None:
    """Populate ``.grad`` of every parameter that ``loss`` depends on."""
    if loss.grad_fn is None:
        raise RuntimeError("backward called without a recorded forward pass")
    if loss.numel() != 1:
        raise ValueError("loss must be a scalar")
    loss.backward()


# Checkpoint files: b"FDAN", u16 version, then entries
# (u32 name length, name, u8 dtype, u8 rank, u64 dims..., raw little-endian values).

MAGIC = b"FDAN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_entries(path: str | Path, entries: list[tuple[str, np.ndarray]]) -> None:
    buf = bytearray(MAGIC)
    buf += struct.pack("<H", VERSION)
    for name, arr in entries:
        arr = np.asarray(arr)
        if arr.dtype == np.float32:
            code = 0
        elif arr.dtype == np.float64:
            code = 1
        else:
            raise TypeError(f"entry {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<BB", code, arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    Path(path).write_bytes(bytes(buf))


def read_entries(path: str | Path) -> list[tuple[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 6
    entries = []
    while pos < len(data):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        code, rank = struct.unpack_from("<BB", data, pos)
        pos += 2
        dims = struct.unpack_from(f"<{rank}Q", data, pos)
        pos += 8 * rank
        dt = _DTYPES[code]
        count = math.prod(dims)
        arr = np.frombuffer(data, dtype=dt, count=count, offset=pos).reshape(dims).copy()
        pos += count * dt.itemsize
        entries.append((name, arr))
    return entries


def _encode_str(s: str) -> np.ndarray:
    return np.array([ord(c) for c in s], dtype=np.float64)


def _decode_str(a: np.ndarray) -> str:
    return "".join(chr(int(c)) for c in a)


def save_checkpoint(path: str | Path, model: Model, meta: Optional[dict] = None) -> None:
    """``meta`` maps names to str, int, float or sequences of str. The key
    ``state`` is special: a dict of named arrays (optimizer moments) stored
    as raw entries."""
    meta = dict(meta or {})
    extra = meta.pop("state", {})
    entries = []
    cfg = asdict(model.cfg)
    for key in ("vocab_size", "d", "layers", "heads", "ffn", "dropout"):
        entries.append((f"config.{key}", np.array(cfg[key], dtype=np.float64)))
    entries.append(("config.enc_channels", np.array(cfg["enc_channels"], dtype=np.float64)))
    entries.append(("config.strides", np.array(cfg["strides"], dtype=np.float64).reshape(-1, 2)))
    for key, value in sorted(meta.items()):
        if isinstance(value, str):
            entries.append((f"meta.str.{key}", _encode_str(value)))
        elif isinstance(value, (list, tuple)):
            joined = "\x00".join(value)
            entries.append((f"meta.strs.{key}", _encode_str(joined)))
        else:
            entries.append((f"meta.num.{key}", np.array(value, dtype=np.float64)))
    for name, tensor in model.state_dict().items():
        entries.append((name, tensor.detach().cpu().numpy()))
    for name in sorted(extra):
        entries.append((f"state.{name}", np.asarray(extra[name])))
    write_entries(path, entries)


def load_checkpoint(path: str | Path) -> tuple[Model, dict]:
    entries = read_entries(path)
    cfg_kw: dict = {}
    meta: dict = {}
    state = {}
    for name, arr in entries:
        if name.startswith("config."):
            key = name[len("config."):]
            if key == "enc_channels":
                cfg_kw[key] = tuple(int(c) for c in arr)
            elif key == "strides":
                cfg_kw[key] = tuple((int(a), int(b)) for a, b in arr)
            elif key == "dropout":
                cfg_kw[key] = float(arr)
            else:
                cfg_kw[key] = int(arr)
        elif name.startswith("meta.str."):
            meta[name[len("meta.str."):]] = _decode_str(arr)
        elif name.startswith("meta.strs."):
            joined = _decode_str(arr)
            meta[name[len("meta.strs."):]] = tuple(joined.split("\x00")) if joined else ()
        elif name.startswith("meta.num."):
            value = float(arr)
            meta[name[len("meta.num."):]] = int(value) if value.is_integer() else value
        elif name.startswith("state."):
            meta.setdefault("state", {})[name[len("state."):]] = arr
        else:
            state[name] = torch.from_numpy(arr)
    cfg = ModelConfig(**cfg_kw)
    dtype = next(iter(state.values())).dtype if state else torch.float32
    model = Model(cfg).to(dtype)
    model.load_state_dict(state)
    return model, meta
