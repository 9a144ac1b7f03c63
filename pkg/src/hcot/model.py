"""Pre-norm decoder-only transformer with [CoT] embedding overrides.

Parameters live in a flat, ordered ``name -> float64 array`` dict. The
training/encoding forward runs through :mod:`hcot.numerics` so it can be
taped; generation uses :class:`Decoder`, a plain-numpy key/value-cache path
over the same parameters.

An override swaps the token-embedding lookup at a [CoT] position for an
external vector *before* the positional embedding is added, so a
representation produced at one absolute position can be consumed at another.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from hcot import numerics as nx
from hcot.vocab import COT

CHECKPOINT_MAGIC = b"HCOTCKPT"
CHECKPOINT_VERSION = 1


class FrozenModelError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    hidden_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    max_seq_len: int = 256
    cot_token_id: int = COT
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if not 0 <= self.cot_token_id < self.vocab_size:
            raise ValueError("cot_token_id must be a vocabulary index")
        if min(self.vocab_size, self.hidden_dim, self.num_layers, self.num_heads, self.max_seq_len) < 1:
            raise ValueError("model sizes must be positive")
        if self.dropout_rate != 0.0:
            # training is deterministic; dropout is accepted only at zero
            raise ValueError("dropout is not supported")

    def param_count(self) -> int:
        V, d, L, T = self.vocab_size, self.hidden_dim, self.num_layers, self.max_seq_len
        return V * d + T * d + L * (12 * d * d + 13 * d) + 2 * d + d * V


@dataclass
class EmbeddingOverride:
    position: int
    vector: np.ndarray


@dataclass
class ForwardResult:
    logits: np.ndarray  # [T, V]
    final_hidden: np.ndarray  # [T, d]


class Transformer:
    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray], frozen: bool = False):
        self.config = config
        self.params = params
        self.frozen = False
        if frozen:
            self.freeze()

    def freeze(self) -> None:
        for arr in self.params.values():
            arr.flags.writeable = False
        self.frozen = True

    def copy(self, frozen: bool = False) -> Transformer:
        return Transformer(self.config, {k: v.copy() for k, v in self.params.items()}, frozen=frozen)

    def num_parameters(self) -> int:
        return sum(a.size for a in self.params.values())

    def serialize_params(self) -> bytes:
        chunks = []
        for name, arr in self.params.items():
            chunks.append(f"{name}:{'x'.join(map(str, arr.shape))};".encode())
            chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return b"".join(chunks)

    def param_hash(self) -> str:
        return hashlib.sha256(self.serialize_params()).hexdigest()

    def bind(self, graph: nx.Graph | None) -> dict[str, nx.Tensor]:
        if graph is None:
            return {k: nx.Tensor(v) for k, v in self.params.items()}
        return {k: graph.param(k, v) for k, v in self.params.items()}


def param_names(config: ModelConfig) -> list[str]:
    names = ["tok_emb", "pos_emb"]
    for i in range(config.num_layers):
        p = f"layers.{i}."
        names += [p + s for s in (
            "ln1.g", "ln1.b", "attn.w_qkv", "attn.b_qkv", "attn.w_o", "attn.b_o",
            "ln2.g", "ln2.b", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
        )]
    return names + ["ln_f.g", "ln_f.b", "head.w"]


def init_model(config: ModelConfig, seed: int) -> Transformer:
    rng = np.random.default_rng(seed)
    V, d, T = config.vocab_size, config.hidden_dim, config.max_seq_len
    std = 0.02
    resid_std = std / math.sqrt(2 * config.num_layers)
    shapes = {
        "tok_emb": (V, d), "pos_emb": (T, d), "ln_f.g": (d,), "ln_f.b": (d,), "head.w": (d, V),
    }
    for i in range(config.num_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.w_qkv": (d, 3 * d), p + "attn.b_qkv": (3 * d,),
            p + "attn.w_o": (d, d), p + "attn.b_o": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.w1": (d, 4 * d), p + "mlp.b1": (4 * d,),
            p + "mlp.w2": (4 * d, d), p + "mlp.b2": (d,),
        })
    params = {}
    for name in param_names(config):
        shape = shapes[name]
        if name.endswith((".g",)):
            params[name] = np.ones(shape)
        elif name.endswith((".b", "b_qkv", "b_o", "b1", "b2")):
            params[name] = np.zeros(shape)
        elif name.endswith(("w_o", "w2")):
            params[name] = rng.normal(0.0, resid_std, shape)
        else:
            params[name] = rng.normal(0.0, std, shape)
    return Transformer(config, params)


# -- taped / batched forward -------------------------------------------------


def forward_batch(
    model: Transformer,
    tokens: np.ndarray,
    overrides: Sequence[tuple[int, int, np.ndarray]] = (),
    graph: nx.Graph | None = None,
) -> tuple[nx.Tensor, nx.Tensor]:
    """Causal forward over right-padded ``tokens[B, T]``.

    ``overrides`` holds ``(batch_row, position, vector)`` triples. Returns
    ``(logits[B, T, V], final_hidden[B, T, d])`` as tensors on ``graph``.
    """
    cfg = model.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be [B, T], got shape {tokens.shape}")
    B, T = tokens.shape
    if T > cfg.max_seq_len:
        raise ValueError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
    p = model.bind(graph)
    x = nx.embedding(p["tok_emb"], tokens)
    if overrides:
        bi = np.array([o[0] for o in overrides])
        ti = np.array([o[1] for o in overrides])
        if (ti < 0).any() or (ti >= T).any():
            raise ValueError("override position outside the sequence")
        if (tokens[bi, ti] != cfg.cot_token_id).any():
            raise ValueError("override position does not hold the [CoT] token")
        vecs = np.stack([np.asarray(o[2], dtype=np.float64) for o in overrides])
        if vecs.shape[1] != cfg.hidden_dim:
            raise ValueError(f"override vectors have dim {vecs.shape[1]}, model dim is {cfg.hidden_dim}")
        x = nx.replace_rows(x, bi, ti, nx.constant(vecs))
    x = nx.add(x, nx.embedding(p["pos_emb"], np.arange(T)))
    for i in range(cfg.num_layers):
        q = f"layers.{i}."
        h = nx.layer_norm(x, p[q + "ln1.g"], p[q + "ln1.b"])
        h = nx.linear(h, p[q + "attn.w_qkv"], p[q + "attn.b_qkv"])
        h = nx.causal_attention(h, cfg.num_heads)
        x = nx.add(x, nx.linear(h, p[q + "attn.w_o"], p[q + "attn.b_o"]))
        h = nx.layer_norm(x, p[q + "ln2.g"], p[q + "ln2.b"])
        h = nx.gelu(nx.linear(h, p[q + "mlp.w1"], p[q + "mlp.b1"]))
        x = nx.add(x, nx.linear(h, p[q + "mlp.w2"], p[q + "mlp.b2"]))
    hidden = nx.layer_norm(x, p["ln_f.g"], p["ln_f.b"])
    logits = nx.matmul(hidden, p["head.w"])
    return logits, hidden


def forward(model: Transformer, tokens: Sequence[int], overrides: Iterable[EmbeddingOverride] = ()) -> ForwardResult:
    tokens = list(tokens)
    if not tokens:
        raise ValueError("empty token sequence")
    ov = [(0, o.position, o.vector) for o in overrides]
    logits, hidden = forward_batch(model, np.asarray([tokens]), ov)
    return ForwardResult(logits.data[0], hidden.data[0])


def extract_cot_representation(result: ForwardResult, position: int) -> np.ndarray:
    T = result.final_hidden.shape[0]
    if not 0 <= position < T:
        raise IndexError(f"position {position} outside sequence of length {T}")
    return result.final_hidden[position].copy()


# -- incremental decoding ----------------------------------------------------


def _ln(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    return xc / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps) * g + b


def _gelu(x):
    c = math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * (x * x * x))))


class Decoder:
    """Key/value-cached incremental forward over one sequence (read-only on the model)."""

    def __init__(self, model: Transformer):
        self.model = model
        cfg = model.config
        self.H = cfg.num_heads
        self.dh = cfg.hidden_dim // cfg.num_heads
        self.keys: list[np.ndarray] = [np.zeros((self.H, 0, self.dh)) for _ in range(cfg.num_layers)]
        self.values: list[np.ndarray] = [np.zeros((self.H, 0, self.dh)) for _ in range(cfg.num_layers)]
        self.tokens: list[int] = []

    @property
    def length(self) -> int:
        return len(self.tokens)

    def feed(self, tokens: Sequence[int], overrides: dict[int, np.ndarray] | None = None) -> np.ndarray:
        """Append ``tokens``; ``overrides`` maps offsets within ``tokens`` to vectors.

        Returns the next-token logits after the last fed token.
        """
        cfg = self.model.config
        P = self.model.params
        n = len(tokens)
        start = self.length
        if n == 0:
            raise ValueError("nothing to feed")
        if start + n > cfg.max_seq_len:
            raise ValueError(f"sequence length {start + n} exceeds max_seq_len {cfg.max_seq_len}")
        ids = np.asarray(tokens, dtype=np.int64)
        x = P["tok_emb"][ids]
        for off, vec in (overrides or {}).items():
            if ids[off] != cfg.cot_token_id:
                raise ValueError("override position does not hold the [CoT] token")
            x[off] = vec
        x = x + P["pos_emb"][start:start + n]
        sc = 1.0 / math.sqrt(self.dh)
        mask = None
        if n > 1:
            mask = np.triu(np.ones((n, start + n), dtype=bool), k=start + 1)
        for i in range(cfg.num_layers):
            q = f"layers.{i}."
            h = _ln(x, P[q + "ln1.g"], P[q + "ln1.b"])
            qkv = (h @ P[q + "attn.w_qkv"] + P[q + "attn.b_qkv"]).reshape(n, 3, self.H, self.dh)
            qh = qkv[:, 0].transpose(1, 0, 2)
            self.keys[i] = np.concatenate([self.keys[i], qkv[:, 1].transpose(1, 0, 2)], axis=1)
            self.values[i] = np.concatenate([self.values[i], qkv[:, 2].transpose(1, 0, 2)], axis=1)
            s = (qh @ self.keys[i].transpose(0, 2, 1)) * sc
            if mask is not None:
                s[:, mask] = -np.inf
            s -= s.max(axis=-1, keepdims=True)
            w = np.exp(s)
            w /= w.sum(axis=-1, keepdims=True)
            a = (w @ self.values[i]).transpose(1, 0, 2).reshape(n, -1)
            x = x + a @ P[q + "attn.w_o"] + P[q + "attn.b_o"]
            h = _ln(x, P[q + "ln2.g"], P[q + "ln2.b"])
            x = x + _gelu(h @ P[q + "mlp.w1"] + P[q + "mlp.b1"]) @ P[q + "mlp.w2"] + P[q + "mlp.b2"]
        hidden = _ln(x[-1], P["ln_f.g"], P["ln_f.b"])
        self.tokens.extend(int(t) for t in ids)
        return hidden @ P["head.w"]


def select_token(logits: np.ndarray, temperature: float, top_p: float, rng: np.random.Generator | None) -> int:
    """Greedy (lowest id on ties) when temperature <= 0.01, else nucleus sampling."""
    if temperature <= 0.01:
        return int(np.argmax(logits))
    z = logits / temperature
    z = z - z.max()
    probs = np.exp(z)
    probs /= probs.sum()
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order])
    keep = order[: int(np.searchsorted(cum, top_p) + 1)]
    p = probs[keep] / probs[keep].sum()
    rng = rng if rng is not None else np.random.default_rng(0)
    return int(rng.choice(keep, p=p))


def generate(
    decoder: Decoder,
    logits: np.ndarray,
    stop_set: set[int] | frozenset[int],
    max_new: int,
    temperature: float = 0.01,
    top_p: float = 1.0,
    rng: np.random.Generator | None = None,
) -> list[int]:
    """Continue from ``logits`` (the output of the last feed).

    The final emitted token is *not* fed back, so a caller can feed it with
    an override. Generation also stops when the context is full.
    """
    out: list[int] = []
    limit = decoder.model.config.max_seq_len
    while True:
        tok = select_token(logits, temperature, top_p, rng)
        out.append(tok)
        if tok in stop_set or len(out) >= max_new or decoder.length >= limit:
            return out
        logits = decoder.feed([tok])


def decode(
    model: Transformer,
    prefix: Sequence[int],
    overrides: Iterable[EmbeddingOverride] = (),
    stop_set: Iterable[int] = (),
    max_new: int = 64,
    temperature: float = 0.01,
    top_p: float = 1.0,
    seed: int = 0,
) -> list[int]:
    if not prefix:
        raise ValueError("empty prefix")
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    dec = Decoder(model)
    logits = dec.feed(list(prefix), {o.position: o.vector for o in overrides})
    return generate(dec, logits, frozenset(stop_set), max_new, temperature, top_p, np.random.default_rng(seed))


# -- checkpoints ---------------------------------------------------------------


def checkpoint_bytes(model: Transformer, meta: dict | None = None) -> bytes:
    """Versioned container: magic, version, JSON header length, header, raw ``<f8`` data."""
    entries = []
    offset = 0
    for name, arr in model.params.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "frozen": model.frozen,
        "params": entries,
        "content_hash": model.param_hash(),
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    data = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in model.params.values())
    return CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)) + hbytes + data


def save_checkpoint(model: Transformer, path, meta: dict | None = None) -> str:
    """Write the checkpoint and return the sha256 of the file bytes."""
    blob = checkpoint_bytes(model, meta)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(len(CHECKPOINT_MAGIC) + 12)
        if head[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint")
        version, hlen = struct.unpack("<IQ", head[len(CHECKPOINT_MAGIC):])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        return json.loads(fh.read(hlen))


def load_checkpoint(path) -> Transformer:
    blob = Path(path).read_bytes()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    version, hlen = struct.unpack("<IQ", blob[len(CHECKPOINT_MAGIC): len(CHECKPOINT_MAGIC) + 12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    start = len(CHECKPOINT_MAGIC) + 12
    header = json.loads(blob[start:start + hlen])
    data = np.frombuffer(blob, dtype="<f8", offset=start + hlen)
    params = {}
    for e in header["params"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        off = e["offset"] // 8
        params[e["name"]] = data[off:off + n].reshape(e["shape"]).astype(np.float64)
    model = Transformer(ModelConfig(**header["config"]), params, frozen=header["frozen"])
    if model.param_hash() != header["content_hash"]:
        raise ValueError(f"checkpoint {path} failed its content hash check")
    return model


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
