"""Encoder - context adapter - decoder assembly.

The page encoder is a small patch-embedding Transformer. The adapter
compresses the (prev, curr, next) page embeddings into N latent tokens via
cross-attention; the decoder generates markup autoregressively over a memory
of the current-page embedding concatenated with those latents. Missing
neighbor pages are substituted by the cached embedding of an empty page.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from . import blocks
from .blocks import AttentionConfig, PagePositionalEncodings
from .tensor import (NumericError, Parameter, ShapeError, Tensor, concat,
                     cross_entropy_logits, embedding, no_grad)

CKPT_MAGIC = b"MUGATCKPT"
CKPT_VERSION = 1

_DTYPE_TAGS = {np.dtype("float64"): 0, np.dtype("float32"): 1,
               np.dtype("uint8"): 2, np.dtype("int64"): 3}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


@dataclass(frozen=True)
class ModelConfig:
    image_h: int = 64
    image_w: int = 96
    patch: int = 8
    d: int = 64
    n_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    N: int = 4              # latent context tokens (0 = no-context baseline)
    L: int = 2              # adapter layers
    vocab_size: int = 70
    max_target_len: int = 160
    # Full-scale reference settings for this architecture family are
    # P=588, d=1024, adapter L=2 / N=4; the values here are desk-scale.

    def __post_init__(self):
        if self.image_h % self.patch or self.image_w % self.patch:
            raise ValueError(f"patch {self.patch} must divide image "
                             f"({self.image_h}, {self.image_w})")
        if self.N < 0 or self.L < 1:
            raise ValueError("N must be >= 0 and L >= 1")
        if self.N >= self.P:
            raise ValueError(f"N={self.N} must be < P={self.P}")
        if self.vocab_size < 5 or self.max_target_len < 1:
            raise ValueError("invalid vocab/max_target_len")

    @property
    def P(self) -> int:
        return (self.image_h // self.patch) * (self.image_w // self.patch)

    @property
    def attn(self) -> AttentionConfig:
        return AttentionConfig(self.d, self.n_heads)


class PageSource(Enum):
    REAL_PAGE = "real_page"
    EMPTY_PAGE = "empty_page"


@dataclass
class PageEmbedding:
    matrix: Tensor  # (P, d) or (B, P, d)
    source: PageSource = PageSource.REAL_PAGE


@dataclass
class AdapterState:
    latents: Tensor  # (N, d) or (B, N, d)


@dataclass
class PageTriplet:
    curr: np.ndarray
    prev: Optional[np.ndarray] = None
    next: Optional[np.ndarray] = None

    def __post_init__(self):
        for label, p in (("prev", self.prev), ("next", self.next)):
            if p is not None and p.shape != self.curr.shape:
                raise ShapeError(f"{label} page {p.shape} != curr page {self.curr.shape}")


def init_model(cfg: ModelConfig, seed: int, dtype=np.float64) -> "Model":
    """Create a model with normal(0, 0.02) projections / positional tables
    and zero biases, deterministically from `seed`."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    params: dict[str, Parameter] = {}

    def add(p_dict):
        params.update(p_dict)

    def add_param(name, shape, std=blocks.INIT_STD):
        params[name] = Parameter(rng.normal(0.0, std, size=shape).astype(dtype), name)

    d, P, V = cfg.d, cfg.P, cfg.vocab_size
    # encoder
    w, b = blocks.init_linear(rng, cfg.patch * cfg.patch, d, "encoder.patch", dtype)
    add({w.name: w, b.name: b})
    add_param("encoder.pos", (P, d))
    for i in range(cfg.enc_layers):
        pre = f"encoder.l{i}"
        add(blocks.init_layer_norm(d, f"{pre}.ln1", dtype))
        add(blocks.init_attention(rng, cfg.attn, f"{pre}.attn", dtype))
        add(blocks.init_layer_norm(d, f"{pre}.ln2", dtype))
        add(blocks.init_feed_forward(rng, d, f"{pre}.ffn", dtype=dtype))
    add(blocks.init_layer_norm(d, "encoder.lnf", dtype))
    # adapter
    if cfg.N > 0:
        add_param("adapter.latents", (cfg.N, d))
        add_param("adapter.inter_page", (3, d))
        add_param("adapter.intra_page", (P, d))
        for i in range(cfg.L):
            pre = f"adapter.l{i}"
            add(blocks.init_layer_norm(d, f"{pre}.ln_q", dtype))
            add(blocks.init_layer_norm(d, f"{pre}.ln_kv", dtype))
            add(blocks.init_attention(rng, cfg.attn, f"{pre}.attn", dtype))
            add(blocks.init_layer_norm(d, f"{pre}.ln2", dtype))
            add(blocks.init_feed_forward(rng, d, f"{pre}.ffn", dtype=dtype))
        add(blocks.init_layer_norm(d, "adapter.lnf", dtype))
    # decoder
    add_param("decoder.tok", (V, d))
    add_param("decoder.pos", (cfg.max_target_len + 1, d))
    for i in range(cfg.dec_layers):
        pre = f"decoder.l{i}"
        add(blocks.init_layer_norm(d, f"{pre}.ln1", dtype))
        add(blocks.init_attention(rng, cfg.attn, f"{pre}.self_attn", dtype))
        add(blocks.init_layer_norm(d, f"{pre}.ln2", dtype))
        add(blocks.init_attention(rng, cfg.attn, f"{pre}.cross_attn", dtype))
        add(blocks.init_layer_norm(d, f"{pre}.ln3", dtype))
        add(blocks.init_feed_forward(rng, d, f"{pre}.ffn", dtype=dtype))
    add(blocks.init_layer_norm(d, "decoder.lnf", dtype))
    w, b = blocks.init_linear(rng, d, V, "decoder.out", dtype)
    add({w.name: w, b.name: b})
    return Model(cfg, params)


class Model:
    """Parameter container plus forward paths. Inference methods are pure;
    parameter mutation (training) must call `note_update()` so the cached
    empty-page embedding is invalidated."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Parameter]):
        self.cfg = cfg
        self.params = params
        self.version = 0
        self.encode_count = 0
        self._empty_cache: Optional[tuple[int, np.ndarray]] = None

    # -- bookkeeping ----------------------------------------------------

    def note_update(self) -> None:
        self.version += 1

    def group(self, name: str) -> list[Parameter]:
        return [p for k, p in sorted(self.params.items()) if k.startswith(name + ".")]

    def trainable(self) -> list[Parameter]:
        return [p for _, p in sorted(self.params.items()) if p.trainable]

    def set_group_trainable(self, name: str, flag: bool) -> None:
        for p in self.group(name):
            p.set_trainable(flag)

    @property
    def dtype(self):
        return self.params["decoder.tok"].data.dtype

    # -- encoder ----------------------------------------------------------

    def patchify(self, pixels: np.ndarray) -> np.ndarray:
        """(B, H, W) or (H, W) binary raster -> (B, P, patch*patch) float."""
        cfg = self.cfg
        single = pixels.ndim == 2
        if single:
            pixels = pixels[None]
        if pixels.shape[-2:] != (cfg.image_h, cfg.image_w):
            raise ShapeError(f"page raster {pixels.shape[-2:]} does not match config "
                             f"({cfg.image_h}, {cfg.image_w})")
        B = pixels.shape[0]
        p = cfg.patch
        x = pixels.reshape(B, cfg.image_h // p, p, cfg.image_w // p, p)
        x = x.transpose(0, 1, 3, 2, 4).reshape(B, cfg.P, p * p)
        return x.astype(self.dtype)

    def encode_pages(self, pixels: np.ndarray) -> Tensor:
        """Encode a batch of page rasters into (B, P, d) embeddings."""
        cfg = self.cfg
        x = Tensor(self.patchify(pixels))
        self.encode_count += x.shape[0]
        h = x @ self.params["encoder.patch.w"].tensor + self.params["encoder.patch.b"].tensor
        h = h + self.params["encoder.pos"].tensor
        for i in range(cfg.enc_layers):
            pre = f"encoder.l{i}"
            normed = blocks.apply_layer_norm(h, self.params, f"{pre}.ln1")
            h = h + blocks.multi_head_attention(
                normed, normed, None, cfg.attn, self.params, f"{pre}.attn",
                counter_tag="encoder")
            h = h + blocks.feed_forward(
                blocks.apply_layer_norm(h, self.params, f"{pre}.ln2"), self.params, f"{pre}.ffn")
        return blocks.apply_layer_norm(h, self.params, "encoder.lnf")

    def encode_page(self, pixels: np.ndarray) -> PageEmbedding:
        """Single-page wrapper around encode_pages."""
        if pixels.ndim != 2:
            raise ShapeError(f"encode_page expects a single (H, W) raster, got {pixels.shape}")
        emb = self.encode_pages(pixels[None])
        return PageEmbedding(emb.reshape(self.cfg.P, self.cfg.d))

    def empty_page_embedding(self) -> PageEmbedding:
        """encode_page of the all-background bitmap, cached per parameter
        version."""
        if self._empty_cache is not None and self._empty_cache[0] == self.version:
            return PageEmbedding(Tensor(self._empty_cache[1]), PageSource.EMPTY_PAGE)
        blank = np.zeros((self.cfg.image_h, self.cfg.image_w), dtype=np.uint8)
        with no_grad():
            emb = self.encode_page(blank)
        self._empty_cache = (self.version, emb.matrix.data)
        return PageEmbedding(emb.matrix, PageSource.EMPTY_PAGE)

    # -- adapter ----------------------------------------------------------

    def page_positions(self) -> PagePositionalEncodings:
        return PagePositionalEncodings(self.params["adapter.inter_page"],
                                       self.params["adapter.intra_page"])

    def adapter_forward(self, prev: Tensor, curr: Tensor, next_: Tensor) -> Tensor:
        """Refine the N learned tokens over the concatenated page context.

        Inputs are (..., P, d); returns (..., N, d).
        """
        cfg = self.cfg
        if cfg.N == 0:
            raise ValueError("adapter_forward called on a no-context (N=0) model")
        ctx = blocks.add_page_positions(prev, curr, next_, self.page_positions())
        x = self.params["adapter.latents"].tensor
        if len(ctx.shape) == 3:  # broadcast latents over the batch
            x = x.reshape(1, cfg.N, cfg.d)
        for i in range(cfg.L):
            pre = f"adapter.l{i}"
            kv = blocks.apply_layer_norm(ctx, self.params, f"{pre}.ln_kv")
            x = x + blocks.multi_head_attention(
                blocks.apply_layer_norm(x, self.params, f"{pre}.ln_q"),
                kv, None, cfg.attn, self.params, f"{pre}.attn", counter_tag="adapter")
            x = x + blocks.feed_forward(
                blocks.apply_layer_norm(x, self.params, f"{pre}.ln2"), self.params, f"{pre}.ffn")
        # final layer-norm so latents match the scale of the layer-normed
        # page rows they share the decoder memory with
        return blocks.apply_layer_norm(x, self.params, "adapter.lnf")

    # -- decoder ----------------------------------------------------------

    def build_memory(self, curr_emb: Tensor, latents: Optional[Tensor]) -> Tensor:
        """Decoder cross-attention memory: current page rows plus adapter
        latents (length P+N), or just the page rows when contextless."""
        if latents is None:
            return curr_emb
        if len(curr_emb.shape) != len(latents.shape):
            raise ShapeError(f"memory parts disagree: {curr_emb.shape} vs {latents.shape}")
        return concat([curr_emb, latents], axis=-2)

    def decode_logits(self, memory: Tensor, tokens: np.ndarray) -> Tensor:
        """Next-token logits at every prefix position.

        memory: (B, M, d) or (M, d); tokens: int (B, T) or (T,).
        """
        cfg = self.cfg
        tokens = np.asarray(tokens)
        T = tokens.shape[-1]
        if T > cfg.max_target_len + 1:
            raise ValueError(f"prefix length {T} exceeds max_target_len {cfg.max_target_len}")
        if tokens.max() >= cfg.vocab_size or tokens.min() < 0:
            raise ValueError(f"unknown token id (vocab size {cfg.vocab_size})")
        h = embedding(self.params["decoder.tok"].tensor, tokens) \
            + embedding(self.params["decoder.pos"].tensor, np.arange(T))
        mask = blocks.causal_mask(T)
        for i in range(cfg.dec_layers):
            pre = f"decoder.l{i}"
            q = blocks.apply_layer_norm(h, self.params, f"{pre}.ln1")
            h = h + blocks.multi_head_attention(
                q, q, mask, cfg.attn, self.params, f"{pre}.self_attn", counter_tag="decoder.self")
            h = h + blocks.multi_head_attention(
                blocks.apply_layer_norm(h, self.params, f"{pre}.ln2"),
                memory, None, cfg.attn, self.params, f"{pre}.cross_attn",
                counter_tag="decoder.cross")
            h = h + blocks.feed_forward(
                blocks.apply_layer_norm(h, self.params, f"{pre}.ln3"), self.params, f"{pre}.ffn")
        h = blocks.apply_layer_norm(h, self.params, "decoder.lnf")
        return h @ self.params["decoder.out.w"].tensor + self.params["decoder.out.b"].tensor

    # -- training / inference entry points ---------------------------------

    def triplet_memory(self, triplet: PageTriplet) -> Tensor:
        """Encode a (prev, curr, next) triplet into the decoder memory,
        substituting the empty-page embedding for missing neighbors."""
        curr = self.encode_page(triplet.curr).matrix
        if self.cfg.N == 0:
            return self.build_memory(curr, None)
        empty = None
        sides = []
        for page in (triplet.prev, triplet.next):
            if page is None:
                if empty is None:
                    empty = self.empty_page_embedding().matrix
                sides.append(empty)
            else:
                sides.append(self.encode_page(page).matrix)
        latents = self.adapter_forward(sides[0], curr, sides[1])
        return self.build_memory(curr, latents)

    def forward_loss(self, triplet: PageTriplet, target_ids: list[int],
                     pad_id: int = 0) -> Tensor:
        """Teacher-forced cross-entropy of the target sequence (with BOS/EOS)
        against the decoder's shifted predictions."""
        if len(target_ids) < 2:
            raise ValueError("empty target sequence")
        memory = self.triplet_memory(triplet)
        ids = np.asarray(target_ids)
        logits = self.decode_logits(memory, ids[:-1])
        targets = ids[1:].copy()
        return cross_entropy_logits(logits, targets, pad_id=pad_id)

    def greedy_decode(self, memories: Tensor, bos_id: int, eos_id: int,
                      max_len: Optional[int] = None,
                      use_cache: bool = True) -> list[list[int]]:
        """Batched greedy decoding from BOS until EOS or max length.

        memories: (B, M, d). Returns generated id lists without BOS/EOS.
        The cached path keeps per-layer attention key/value state so each
        step costs one token instead of re-running the whole prefix; the
        uncached path recomputes the full prefix and serves as a reference.
        """
        cfg = self.cfg
        B = memories.shape[0]
        limit = max_len if max_len is not None else cfg.max_target_len
        if use_cache:
            tokens = self._greedy_decode_cached(memories.data, bos_id, eos_id, limit)
        else:
            tokens = np.full((B, 1), bos_id, dtype=np.int64)
            done = np.zeros(B, dtype=bool)
            with no_grad():
                for _ in range(limit):
                    logits = self.decode_logits(memories, tokens)
                    nxt = logits.data[:, -1, :].argmax(axis=-1)
                    nxt = np.where(done, eos_id, nxt)
                    tokens = np.concatenate([tokens, nxt[:, None]], axis=1)
                    done |= nxt == eos_id
                    if done.all():
                        break
        out = []
        for row in tokens[:, 1:]:
            ids = []
            for t in row:
                if t == eos_id:
                    break
                ids.append(int(t))
            out.append(ids)
        return out

    def _greedy_decode_cached(self, memories: np.ndarray, bos_id: int,
                              eos_id: int, limit: int) -> np.ndarray:
        """Plain-numpy incremental decoding with per-layer key/value caches."""
        cfg = self.cfg
        nh, dh = cfg.n_heads, cfg.attn.d_head
        B, M, _ = memories.shape
        P = self.params

        def w(name):
            return P[name].data

        def proj_heads(x, prefix):
            # (B, T, d) -> (B, nh, T, dh)
            y = x @ w(f"{prefix}.w") + w(f"{prefix}.b")
            return y.reshape(B, -1, nh, dh).transpose(0, 2, 1, 3)

        # cross-attention keys/values are fixed per layer
        cross_kv = []
        for i in range(cfg.dec_layers):
            pre = f"decoder.l{i}.cross_attn"
            cross_kv.append((proj_heads(memories, f"{pre}.k"),
                             proj_heads(memories, f"{pre}.v")))
        self_k = [np.empty((B, nh, limit + 1, dh), dtype=self.dtype)
                  for _ in range(cfg.dec_layers)]
        self_v = [np.empty((B, nh, limit + 1, dh), dtype=self.dtype)
                  for _ in range(cfg.dec_layers)]

        scale = 1.0 / np.sqrt(dh)
        tokens = np.full((B, 1), bos_id, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        for t in range(limit):
            h = w("decoder.tok")[tokens[:, -1]] + w("decoder.pos")[t]  # (B, d)
            for i in range(cfg.dec_layers):
                pre = f"decoder.l{i}"
                x = _np_layer_norm(h, w(f"{pre}.ln1.gain"), w(f"{pre}.ln1.bias"))
                q = (x @ w(f"{pre}.self_attn.q.w")
                     + w(f"{pre}.self_attn.q.b")).reshape(B, nh, dh)
                self_k[i][:, :, t] = (x @ w(f"{pre}.self_attn.k.w")
                                      + w(f"{pre}.self_attn.k.b")).reshape(B, nh, dh)
                self_v[i][:, :, t] = (x @ w(f"{pre}.self_attn.v.w")
                                      + w(f"{pre}.self_attn.v.b")).reshape(B, nh, dh)
                att = _np_attend(q, self_k[i][:, :, :t + 1],
                                 self_v[i][:, :, :t + 1], scale)
                h = h + (att.reshape(B, cfg.d) @ w(f"{pre}.self_attn.o.w")
                         + w(f"{pre}.self_attn.o.b"))
                x = _np_layer_norm(h, w(f"{pre}.ln2.gain"), w(f"{pre}.ln2.bias"))
                q = (x @ w(f"{pre}.cross_attn.q.w")
                     + w(f"{pre}.cross_attn.q.b")).reshape(B, nh, dh)
                att = _np_attend(q, *cross_kv[i], scale)
                h = h + (att.reshape(B, cfg.d) @ w(f"{pre}.cross_attn.o.w")
                         + w(f"{pre}.cross_attn.o.b"))
                x = _np_layer_norm(h, w(f"{pre}.ln3.gain"), w(f"{pre}.ln3.bias"))
                inner = x @ w(f"{pre}.ffn.fc1.w") + w(f"{pre}.ffn.fc1.b")
                inner = _np_gelu(inner)
                h = h + (inner @ w(f"{pre}.ffn.fc2.w") + w(f"{pre}.ffn.fc2.b"))
            h = _np_layer_norm(h, w("decoder.lnf.gain"), w("decoder.lnf.bias"))
            logits = h @ w("decoder.out.w") + w("decoder.out.b")
            nxt = logits.argmax(axis=-1)
            nxt = np.where(done, eos_id, nxt)
            tokens = np.concatenate([tokens, nxt[:, None]], axis=1)
            done |= nxt == eos_id
            if done.all():
                break
        return tokens

    def parse_page(self, triplet: PageTriplet, tokenizer) -> str:
        """Greedy parse of one page triplet into a markup string."""
        with no_grad():
            memory = self.triplet_memory(triplet)
            B_memory = memory.reshape(1, *memory.shape)
            ids = self.greedy_decode(B_memory, tokenizer.BOS, tokenizer.EOS)[0]
        return tokenizer.detokenize(ids)


def _np_layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray,
                   eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * gain + bias


def _np_gelu(x: np.ndarray) -> np.ndarray:
    from scipy.special import erf
    return x * 0.5 * (1.0 + erf(x / np.sqrt(2.0)))


def _np_attend(q: np.ndarray, k: np.ndarray, v: np.ndarray,
               scale: float) -> np.ndarray:
    """Single-query attention: q (B, nh, dh), k/v (B, nh, T, dh) -> (B, nh, dh)."""
    scores = np.einsum("bhd,bhtd->bht", q, k) * scale
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    w = e / e.sum(axis=-1, keepdims=True)
    return np.einsum("bht,bhtd->bhd", w, v)


# ----------------------------------------------------------------------
# Checkpoint persistence
# ----------------------------------------------------------------------


def save_tensors(path: str, tensors: dict[str, np.ndarray]) -> None:
    """Binary checkpoint: magic, format version, manifest (count; per tensor
    name length + UTF-8 name, dtype tag, rank, dims), then raw little-endian
    values in manifest order. Tensors are written sorted by name, so
    save -> load -> save is byte-identical."""
    names = sorted(tensors)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<I", len(names)))
        for name in names:
            arr = tensors[name]
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        for name in names:
            arr = tensors[name]
            f.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def load_tensors(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic")
    off = len(CKPT_MAGIC)
    version, count = struct.unpack_from("<II", blob, off)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off += 8
    manifest = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        tag, rank = struct.unpack_from("<BB", blob, off)
        off += 2
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        manifest.append((name, _TAG_DTYPES[tag], dims))
    out = {}
    for name, dtype, dims in manifest:
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(blob, dtype=dtype.newbyteorder("<"), count=n, offset=off)
        off += n * dtype.itemsize
        out[name] = arr.astype(dtype).reshape(dims)
    return out


def save_checkpoint(path: str, model: Model, extra: Optional[dict[str, np.ndarray]] = None) -> None:
    tensors = {name: p.data for name, p in model.params.items()}
    cfg_json = json.dumps(dataclasses.asdict(model.cfg), sort_keys=True)
    tensors["meta.config_json"] = np.frombuffer(cfg_json.encode("utf-8"), dtype=np.uint8)
    if extra:
        tensors.update(extra)
    save_tensors(path, tensors)


def load_checkpoint(path: str, expect_cfg: Optional[ModelConfig] = None
                    ) -> tuple[Model, dict[str, np.ndarray]]:
    """Rebuild a model from a checkpoint. Returns (model, extra_tensors)."""
    tensors = load_tensors(path)
    cfg_raw = tensors.pop("meta.config_json").tobytes().decode("utf-8")
    cfg = ModelConfig(**json.loads(cfg_raw))
    if expect_cfg is not None:
        for fld in ("image_h", "image_w", "patch", "d", "vocab_size"):
            a, b = getattr(cfg, fld), getattr(expect_cfg, fld)
            if a != b:
                raise ValueError(f"checkpoint/config mismatch: {fld} = {a} vs expected {b}")
    params = {}
    extra = {}
    for name, arr in tensors.items():
        if name.startswith(("encoder.", "adapter.", "decoder.")):
            params[name] = Parameter(arr.copy(), name)
        else:
            extra[name] = arr
    model = Model(cfg, params)
    _check_complete(model)
    return model, extra


def _check_complete(model: Model) -> None:
    ref = init_model(model.cfg, seed=0, dtype=model.dtype)
    missing = [n for n in ref.params if n not in model.params
               and not n.startswith("adapter.")]
    if missing:
        raise NumericError(f"checkpoint missing parameters: {missing[:5]}...")


def init_adapter_params(model: Model, seed: int) -> None:
    """Fresh adapter parameters (used when growing a base checkpoint into a
    context model). Deterministic given `seed`; no-op names already present
    are overwritten so repeated calls are idempotent."""
    if model.cfg.N == 0:
        return
    donor = init_model(model.cfg, seed=seed, dtype=model.dtype)
    for name, p in donor.params.items():
        if name.startswith("adapter."):
            model.params[name] = p
    model.note_update()
