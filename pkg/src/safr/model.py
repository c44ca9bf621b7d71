"""Single-layer transformer text classifier with a word-mask front end.

Pipeline: embedding -> word mask -> sinusoidal positions -> multi-head
self-attention (post-norm residual) -> FFN E -> 4E -> E (post-norm residual)
-> mean pooling over real tokens -> linear classifier.

Every intermediate is kept in a :class:`BatchTrace` so the regularizers and
the analysis code read the exact tensors the prediction used.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import PAD, Vocab
from .metrics import RepresentationMatrix
from .vmask import VMask

CHECKPOINT_MAGIC = b"SAFRCK1\0"

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class ModelConfig:
    vocab_size: int
    E: int = 256
    d_ff: int = 1024
    M: int = 4
    G: int = 2
    max_len: int = 64
    dropout: float = 0.1
    seed: int = 0
    use_vmask: bool = True
    use_positional: bool = True
    mask_temperature: float = 0.5
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("vocab_size", "E", "d_ff", "M", "G", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.E % self.M:
            raise ValueError(f"head count {self.M} does not divide E={self.E}")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")

    @property
    def d_k(self) -> int:
        return self.E // self.M

    @property
    def torch_dtype(self):
        return _DTYPES[self.dtype]

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def sinusoidal_table(max_len: int, dim: int, dtype=torch.float64) -> torch.Tensor:
    pos = torch.arange(max_len, dtype=torch.float64)[:, None]
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / dim)
    pe = torch.zeros(max_len, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return pe.to(dtype)


def _dropout(x, p, generator):
    if p == 0 or generator is None:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return x * keep / (1 - p)


@dataclass
class BatchTrace:
    """Batched intermediates of one forward pass (torch tensors, graph attached)."""

    valid: torch.Tensor          # (B, T) bool
    lengths: torch.Tensor        # (B,)
    embedding: torch.Tensor      # (B, T, E)
    vmask_out: torch.Tensor      # (B, T, E), S'
    mask_probs: torch.Tensor | None  # (B, T)
    mask_z: torch.Tensor | None
    X: torch.Tensor              # (B, T, E)
    attn_weights: torch.Tensor   # (B, M, T, T), pre-dropout
    attn_out: torch.Tensor       # (B, T, E)
    fc1_out: torch.Tensor        # (B, T, d_ff)
    fc2_out: torch.Tensor        # (B, T, E)
    pooled: torch.Tensor         # (B, E)
    logits: torch.Tensor         # (B, G)

    def example(self, b: int, tokens=None) -> "ForwardTrace":
        T = int(self.lengths[b])

        def rows(t):
            return t[b, :T].detach().to(torch.float64).cpu().numpy()

        return ForwardTrace(
            tokens=list(tokens) if tokens is not None else None,
            embedding=rows(self.embedding),
            vmask_out=rows(self.vmask_out),
            mask_probs=None if self.mask_probs is None else rows(self.mask_probs),
            X=rows(self.X),
            attn_weights=self.attn_weights[b, :, :T, :T].detach().double().cpu().numpy(),
            attn_out=rows(self.attn_out),
            fc1_out=rows(self.fc1_out),
            fc2_out=rows(self.fc2_out),
            pooled=self.pooled[b].detach().double().cpu().numpy(),
            logits=self.logits[b].detach().double().cpu().numpy(),
        )


@dataclass
class ForwardTrace:
    """Intermediates of one example, float64, padding removed."""

    tokens: list[str] | None
    embedding: np.ndarray
    vmask_out: np.ndarray
    mask_probs: np.ndarray | None
    X: np.ndarray
    attn_weights: np.ndarray
    attn_out: np.ndarray
    fc1_out: np.ndarray
    fc2_out: np.ndarray
    pooled: np.ndarray
    logits: np.ndarray

    _LAYER_FIELDS = {
        "embedding": "embedding",
        "vmask": "vmask_out",
        "attention_out": "attn_out",
        "fc1": "fc1_out",
        "fc2": "fc2_out",
    }

    @property
    def T(self) -> int:
        return self.embedding.shape[0]

    def layer(self, tag: str) -> RepresentationMatrix:
        try:
            name = self._LAYER_FIELDS[tag]
        except KeyError:
            raise KeyError(
                f"unknown layer {tag!r}; expected one of {sorted(self._LAYER_FIELDS)}") from None
        return RepresentationMatrix(tag, getattr(self, name))


class SafrClassifier(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = c = config
        dt = c.torch_dtype
        g = torch.Generator().manual_seed(c.seed)

        def normal(*shape, std):
            return nn.Parameter(torch.randn(*shape, generator=g, dtype=torch.float64).mul(std).to(dt))

        def xavier(fan_in, fan_out, *lead):
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            w = torch.rand(*lead, fan_in, fan_out, generator=g, dtype=torch.float64)
            return nn.Parameter(((2 * w - 1) * bound).to(dt))

        def zeros(*shape):
            return nn.Parameter(torch.zeros(*shape, dtype=dt))

        def ones(*shape):
            return nn.Parameter(torch.ones(*shape, dtype=dt))

        emb = normal(c.vocab_size, c.E, std=1.0 / math.sqrt(c.E))
        with torch.no_grad():
            emb[PAD].zero_()
        self.embedding = emb
        self.vmask = VMask(c.E, c.mask_temperature) if c.use_vmask else None
        if self.vmask is not None:
            self.vmask.to(dt)
        self.attn_w_q = xavier(c.E, c.d_k, c.M)
        self.attn_w_k = xavier(c.E, c.d_k, c.M)
        self.attn_w_v = xavier(c.E, c.d_k, c.M)
        self.attn_w_o = xavier(c.E, c.E)
        self.attn_b_o = zeros(c.E)
        self.ln1_weight, self.ln1_bias = ones(c.E), zeros(c.E)
        self.fc1_weight, self.fc1_bias = xavier(c.E, c.d_ff), zeros(c.d_ff)
        self.fc2_weight, self.fc2_bias = xavier(c.d_ff, c.E), zeros(c.E)
        self.ln2_weight, self.ln2_bias = ones(c.E), zeros(c.E)
        self.cls_weight, self.cls_bias = xavier(c.E, c.G), zeros(c.G)
        self.register_buffer("pe", sinusoidal_table(c.max_len, c.E, dt), persistent=False)
        self.embedding.register_hook(self._zero_pad_grad)

    @staticmethod
    def _zero_pad_grad(grad):
        grad = grad.clone()
        grad[PAD] = 0
        return grad

    # -- stages ---------------------------------------------------------
    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.config.vocab_size):
            raise ValueError(f"token id out of range [0, {self.config.vocab_size})")
        return self.embedding[ids]

    def positional_encode(self, s: torch.Tensor) -> torch.Tensor:
        T = s.shape[-2]
        if T > self.config.max_len:
            raise ValueError(f"sequence length {T} exceeds max_len {self.config.max_len}")
        if not self.config.use_positional:
            return s
        return s + self.pe[:T]

    def attention(self, X, valid, generator=None):
        c = self.config
        q = torch.einsum("bte,hed->bhtd", X, self.attn_w_q)
        k = torch.einsum("bte,hed->bhtd", X, self.attn_w_k)
        v = torch.einsum("bte,hed->bhtd", X, self.attn_w_v)
        scores = q @ k.transpose(-1, -2) / math.sqrt(c.d_k)
        scores = scores.masked_fill(~valid[:, None, None, :], float("-inf"))
        A = torch.softmax(scores, dim=-1)
        ctx = _dropout(A, c.dropout, generator) @ v              # (B, M, T, d_k)
        ctx = ctx.transpose(1, 2).reshape(X.shape[0], X.shape[1], c.E)
        h = F.layer_norm(X + ctx @ self.attn_w_o + self.attn_b_o, (c.E,),
                         self.ln1_weight, self.ln1_bias)
        return h, A

    def ffn(self, h, generator=None):
        c = self.config
        fc1 = torch.relu(h @ self.fc1_weight + self.fc1_bias)
        out = _dropout(fc1 @ self.fc2_weight + self.fc2_bias, c.dropout, generator)
        fc2 = F.layer_norm(h + out, (c.E,), self.ln2_weight, self.ln2_bias)
        return fc1, fc2

    def classify(self, fc2, valid):
        w = valid.to(fc2.dtype).unsqueeze(-1)
        pooled = (fc2 * w).sum(1) / w.sum(1)
        return pooled, pooled @ self.cls_weight + self.cls_bias

    # -- full pass ------------------------------------------------------
    def forward(self, token_ids, lengths, mode: str = "eval",
                mask_generator=None, dropout_generator=None) -> BatchTrace:
        """Run a padded batch.

        ``mode="train"`` samples the relaxed word mask from ``mask_generator``
        and applies dropout from ``dropout_generator``; eval mode is
        deterministic (expected mask, no dropout).
        """
        ids = torch.as_tensor(token_ids, dtype=torch.long)
        if ids.dim() == 1:
            ids = ids[None]
        lengths = torch.as_tensor(lengths, dtype=torch.long).reshape(-1)
        if int(lengths.min()) < 1:
            raise ValueError("every example needs at least one token")
        T = ids.shape[1]
        valid = torch.arange(T)[None, :] < lengths[:, None]
        if mode == "eval":
            dropout_generator = None
        emb = self.embed(ids) * valid.unsqueeze(-1).to(self.embedding.dtype)
        if self.vmask is not None:
            s, p, z = self.vmask(emb, valid, mode, mask_generator)
        else:
            s, p, z = emb, None, None
        X = self.positional_encode(s)
        h, A = self.attention(X, valid, dropout_generator)
        fc1, fc2 = self.ffn(h, dropout_generator)
        pooled, logits = self.classify(fc2, valid)
        return BatchTrace(valid, lengths, emb, s, p, z, X, A, h, fc1, fc2, pooled, logits)

    def trace(self, example, mode="eval") -> ForwardTrace:
        """Eval-mode trace of a single :class:`~safr.data.TokenizedExample`."""
        with torch.no_grad():
            bt = self(example.token_ids, [example.T], mode)
        return bt.example(0, example.tokens)

    def named_tensors(self) -> dict[str, torch.Tensor]:
        return {_canonical(n): p for n, p in self.named_parameters()}


def _canonical(name: str) -> str:
    # attribute names -> dotted checkpoint names (attn_w_q -> attn.w_q)
    if name.startswith("vmask."):
        return name
    if name == "embedding":
        return "embedding.weight"
    head, _, tail = name.partition("_")
    return f"{head}.{tail}"


# -- checkpoint container ------------------------------------------------

@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    vocab: Vocab
    seed: int = 0
    epoch: int = 0
    dev_acc: float | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: SafrClassifier, vocab: Vocab, **kw) -> "Checkpoint":
        tensors = {n: t.detach().cpu().numpy().astype("<f4")
                   for n, t in model.named_tensors().items()}
        return cls(model.config, tensors, vocab, **kw)

    def model(self) -> SafrClassifier:
        m = SafrClassifier(self.config)
        expected = m.named_tensors()
        if set(expected) != set(self.tensors):
            raise ValueError(
                f"checkpoint tensor names differ from model: "
                f"missing {sorted(set(expected) - set(self.tensors))}, "
                f"unexpected {sorted(set(self.tensors) - set(expected))}")
        with torch.no_grad():
            for name, p in expected.items():
                arr = self.tensors[name]
                if tuple(arr.shape) != tuple(p.shape):
                    raise ValueError(
                        f"tensor {name}: shape {arr.shape} != expected {tuple(p.shape)}")
                p.copy_(torch.from_numpy(np.array(arr, dtype=np.float32)).to(p.dtype))
        m.eval()
        return m

    def header(self) -> dict:
        return {
            "config": asdict(self.config),
            "vocab": self.vocab.itos,
            "min_freq": self.vocab.min_freq,
            "vocab_sha256": self.vocab.digest(),
            "seed": self.seed,
            "epoch": self.epoch,
            "dev_acc": self.dev_acc,
            "extra": self.extra,
            "tensors": [[n, list(a.shape)] for n, a in sorted(self.tensors.items())],
        }

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True, ensure_ascii=False).encode("utf-8")
        parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(head)), head]
        for name in sorted(self.tensors):
            parts.append(np.ascontiguousarray(self.tensors[name], dtype="<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if blob[:8] != CHECKPOINT_MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        (hlen,) = struct.unpack_from("<I", blob, 8)
        h = json.loads(blob[12: 12 + hlen].decode("utf-8"))
        vocab = Vocab(h["vocab"], h["min_freq"])
        if vocab.digest() != h["vocab_sha256"]:
            raise ValueError("checkpoint vocab hash mismatch")
        config = ModelConfig.from_dict(h["config"])
        off = 12 + hlen
        tensors = {}
        for name, shape in h["tensors"]:
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape)
            tensors[name] = arr.copy()
            off += 4 * n
        if off != len(blob):
            raise ValueError("trailing bytes in checkpoint")
        ck = cls(config, tensors, vocab, h["seed"], h["epoch"], h["dev_acc"], h["extra"])
        ck.model()  # validates every shape against the config
        return ck

    def save(self, path) -> str:
        blob = self.to_bytes()
        Path(path).write_bytes(blob)
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
