"""Frozen patch encoder, trainable linear adapter, causal decoder.

Visual tokens are injected by overwriting the embedding rows reserved by
the token sequence's visual span, keeping a single position-indexed
stream. The output projection is weight-tied to the token embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .corpus import Image
from .tokenizer import TokenSequence

_NEG_INF = -1e9


@dataclass
class ModelConfig:
    vocab_size: int
    image_width: int = 32
    image_height: int = 32
    channels: int = 1
    patch: int = 8
    d_v: int = 48
    d_m: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 256
    max_len: int = 256
    encoder_attention: bool = False

    @property
    def k_visual(self) -> int:
        return (self.image_height // self.patch) * (self.image_width // self.patch)

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "image_width": self.image_width,
            "image_height": self.image_height,
            "channels": self.channels,
            "patch": self.patch,
            "d_v": self.d_v,
            "d_m": self.d_m,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "max_len": self.max_len,
            "encoder_attention": self.encoder_attention,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class BlockParams:
    """One pre-norm transformer block: attention then feed-forward."""

    ln1_g: T.Tensor
    ln1_b: T.Tensor
    wq: T.Tensor
    bq: T.Tensor
    wk: T.Tensor
    bk: T.Tensor
    wv: T.Tensor
    bv: T.Tensor
    wo: T.Tensor
    bo: T.Tensor
    ln2_g: T.Tensor
    ln2_b: T.Tensor
    w1: T.Tensor
    b1: T.Tensor
    w2: T.Tensor
    b2: T.Tensor

    def tensors(self) -> list[T.Tensor]:
        return [
            self.ln1_g, self.ln1_b, self.wq, self.bq, self.wk, self.bk,
            self.wv, self.bv, self.wo, self.bo, self.ln2_g, self.ln2_b,
            self.w1, self.b1, self.w2, self.b2,
        ]


@dataclass
class EncoderParams:
    """Patch projection (and optional attention block); frozen in both stages."""

    patch: int
    channels: int
    patch_proj: T.Tensor
    attn_block: BlockParams | None = None

    def tensors(self) -> list[T.Tensor]:
        out = [self.patch_proj]
        if self.attn_block is not None:
            out += self.attn_block.tensors()
        return out


@dataclass
class AdapterParams:
    """Linear map from encoder feature space into the decoder embedding space."""

    W: T.Tensor
    b: T.Tensor

    def tensors(self) -> list[T.Tensor]:
        return [self.W, self.b]


@dataclass
class DecoderParams:
    """Token/positional embeddings, transformer blocks, and final norm."""

    tok_emb: T.Tensor
    pos_emb: T.Tensor
    blocks: list[BlockParams]
    lnf_g: T.Tensor
    lnf_b: T.Tensor

    def tensors(self) -> list[T.Tensor]:
        out = [self.tok_emb, self.pos_emb]
        for blk in self.blocks:
            out += blk.tensors()
        out += [self.lnf_g, self.lnf_b]
        return out


@dataclass
class ModelParams:
    config: ModelConfig
    encoder: EncoderParams
    adapter: AdapterParams
    decoder: DecoderParams

    def all_tensors(self) -> list[T.Tensor]:
        """Declared snapshot order: encoder, adapter, decoder."""
        return (
            self.encoder.tensors() + self.adapter.tensors() + self.decoder.tensors()
        )

    def set_stage(self, stage: str) -> None:
        """'align' trains the adapter only; 'task' adds the decoder.

        The encoder is frozen in both stages.
        """
        if stage not in ("align", "task"):
            raise ValueError(f"unknown stage {stage!r}")
        for t in self.encoder.tensors():
            t.requires_grad = False
        for t in self.adapter.tensors():
            t.requires_grad = True
        train_decoder = stage == "task"
        for t in self.decoder.tensors():
            t.requires_grad = train_decoder


def _init_block(d: int, d_ff: int, rng: np.random.Generator) -> BlockParams:
    return BlockParams(
        ln1_g=T.Tensor(np.ones(d), requires_grad=True),
        ln1_b=T.init_zeros((d,)),
        wq=T.init_uniform((d, d), d, rng),
        bq=T.init_zeros((d,)),
        wk=T.init_uniform((d, d), d, rng),
        bk=T.init_zeros((d,)),
        wv=T.init_uniform((d, d), d, rng),
        bv=T.init_zeros((d,)),
        wo=T.init_uniform((d, d), d, rng),
        bo=T.init_zeros((d,)),
        ln2_g=T.Tensor(np.ones(d), requires_grad=True),
        ln2_b=T.init_zeros((d,)),
        w1=T.init_uniform((d, d_ff), d, rng),
        b1=T.init_zeros((d_ff,)),
        w2=T.init_uniform((d_ff, d), d_ff, rng),
        b2=T.init_zeros((d,)),
    )


def init_model(config: ModelConfig, seed: int) -> ModelParams:
    """Seeded initialization in declared parameter order."""
    rng = np.random.default_rng(seed)
    patch_dim = config.patch * config.patch * config.channels
    encoder = EncoderParams(
        patch=config.patch,
        channels=config.channels,
        patch_proj=T.init_uniform((patch_dim, config.d_v), patch_dim, rng),
        attn_block=_init_block(config.d_v, 4 * config.d_v, rng)
        if config.encoder_attention
        else None,
    )
    adapter = AdapterParams(
        W=T.init_uniform((config.d_v, config.d_m), config.d_v, rng),
        b=T.init_zeros((config.d_m,)),
    )
    decoder = DecoderParams(
        tok_emb=T.init_uniform((config.vocab_size, config.d_m), config.d_m, rng),
        pos_emb=T.init_uniform((config.max_len, config.d_m), config.d_m, rng),
        blocks=[
            _init_block(config.d_m, config.d_ff, rng) for _ in range(config.n_layers)
        ],
        lnf_g=T.Tensor(np.ones(config.d_m), requires_grad=True),
        lnf_b=T.init_zeros((config.d_m,)),
    )
    params = ModelParams(config=config, encoder=encoder, adapter=adapter,
                         decoder=decoder)
    params.set_stage("align")
    return params


# ---------------------------------------------------------------------------
# forward computation
# ---------------------------------------------------------------------------


def _affine_norm(x: T.Tensor, g: T.Tensor, b: T.Tensor) -> T.Tensor:
    return T.add(T.mul(T.layer_norm(x), g), b)


def _block_forward(x: T.Tensor, blk: BlockParams, n_heads: int) -> T.Tensor:
    n = x.shape[0]
    d = x.shape[1]
    d_h = d // n_heads
    a_in = _affine_norm(x, blk.ln1_g, blk.ln1_b)
    q = T.add(T.matmul(a_in, blk.wq), blk.bq)
    k = T.add(T.matmul(a_in, blk.wk), blk.bk)
    v = T.add(T.matmul(a_in, blk.wv), blk.bv)
    mask = T.Tensor(np.triu(np.full((n, n), _NEG_INF), k=1))
    heads = []
    for h in range(n_heads):
        qh = T.narrow(q, 1, h * d_h, d_h)
        kh = T.narrow(k, 1, h * d_h, d_h)
        vh = T.narrow(v, 1, h * d_h, d_h)
        scores = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / np.sqrt(d_h))
        attn = T.softmax(T.add(scores, mask))
        heads.append(T.matmul(attn, vh))
    o = T.concat(heads, axis=1) if len(heads) > 1 else heads[0]
    x = T.add(x, T.add(T.matmul(o, blk.wo), blk.bo))
    f_in = _affine_norm(x, blk.ln2_g, blk.ln2_b)
    ff = T.matmul(T.gelu(T.add(T.matmul(f_in, blk.w1), blk.b1)), blk.w2)
    return T.add(x, T.add(ff, blk.b2))


def encode_image(p: EncoderParams, img: Image) -> T.Tensor:
    """Non-overlapping patches, flattened and linearly projected: [k x d_v]."""
    if img.height % p.patch or img.width % p.patch:
        raise ValueError(
            f"image {img.height}x{img.width} not divisible by patch {p.patch}"
        )
    if img.channels != p.channels:
        raise ValueError(
            f"image has {img.channels} channels, encoder expects {p.channels}"
        )
    ph, pw = img.height // p.patch, img.width // p.patch
    grid = img.as_grid().reshape(ph, p.patch, pw, p.patch, img.channels)
    patches = grid.transpose(0, 2, 1, 3, 4).reshape(ph * pw, -1)
    feats = T.matmul(T.Tensor(patches), p.patch_proj)
    if p.attn_block is not None:
        # the block is causal by construction; for the encoder a full
        # bidirectional mix is unnecessary at this scale
        feats = _block_forward(feats, p.attn_block, 1)
    return feats


def project(a: AdapterParams, f: T.Tensor) -> T.Tensor:
    """Row-wise linear map of visual features into decoder space."""
    return T.add(T.matmul(f, a.W), a.b)


def _decoder_hidden(
    params: ModelParams,
    ids: list[int],
    visual: T.Tensor | None,
    span: tuple[int, int] | None,
) -> T.Tensor:
    cfg = params.config
    n = len(ids)
    if n == 0:
        raise ValueError("empty token sequence")
    if n > cfg.max_len:
        raise ValueError(f"sequence length {n} exceeds max_len {cfg.max_len}")
    dec = params.decoder
    x = T.embedding_lookup(dec.tok_emb, ids)
    if span is not None:
        start, length = span
        if visual is None:
            raise ValueError("visual span present but no image given")
        if visual.shape != (length, cfg.d_m):
            raise ValueError(
                f"visual tokens shape {visual.shape} incompatible with span "
                f"length {length} and d_m {cfg.d_m}"
            )
        parts = []
        if start > 0:
            parts.append(T.narrow(x, 0, 0, start))
        parts.append(visual)
        if start + length < n:
            parts.append(T.narrow(x, 0, start + length, n - start - length))
        x = T.concat(parts, axis=0)
    elif visual is not None:
        raise ValueError("image given but sequence has no visual span")
    x = T.add(x, T.narrow(dec.pos_emb, 0, 0, n))
    for blk in dec.blocks:
        x = _block_forward(x, blk, cfg.n_heads)
    return _affine_norm(x, dec.lnf_g, dec.lnf_b)


def _visual_tokens(
    params: ModelParams, img: Image | None, features: T.Tensor | None
) -> T.Tensor | None:
    if features is None and img is not None:
        features = encode_image(params.encoder, img)
    if features is None:
        return None
    return project(params.adapter, features)


def forward_loss(
    params: ModelParams,
    seq: TokenSequence,
    img: Image | None = None,
    features: T.Tensor | None = None,
) -> T.Tensor:
    """Masked mean next-token negative log-likelihood for one sequence.

    ``features`` may carry precomputed encoder output for the sequence's
    image (the encoder is frozen, so caching it is exact).
    """
    if seq.visual_span is not None and img is None and features is None:
        raise ValueError("sequence has a visual span but no image was given")
    if seq.visual_span is None and (img is not None or features is not None):
        raise ValueError("image given but sequence has no visual span")
    h = _decoder_hidden(
        params, seq.ids, _visual_tokens(params, img, features), seq.visual_span
    )
    n = len(seq.ids)
    if n < 2:
        raise ValueError("sequence too short to predict a next token")
    logits = T.matmul(T.narrow(h, 0, 0, n - 1), T.transpose(params.decoder.tok_emb))
    return T.cross_entropy(logits, seq.ids[1:], seq.loss_mask[1:])


def forward_logits(
    params: ModelParams,
    prefix: list[int],
    img: Image | None = None,
    features: T.Tensor | None = None,
    visual_span: tuple[int, int] | None = None,
) -> np.ndarray:
    """Next-token logits after ``prefix``; matches forward_loss's internals."""
    if not prefix:
        raise ValueError("prefix must be non-empty")
    h = _decoder_hidden(
        params, list(prefix), _visual_tokens(params, img, features), visual_span
    )
    n = len(prefix)
    last = T.matmul(T.narrow(h, 0, n - 1, 1), T.transpose(params.decoder.tok_emb))
    return last.data[0].copy()


def sequence_logits(
    params: ModelParams,
    seq: TokenSequence,
    img: Image | None = None,
    features: T.Tensor | None = None,
) -> np.ndarray:
    """All next-token logit rows for a sequence (positions 0..n-2)."""
    h = _decoder_hidden(
        params, seq.ids, _visual_tokens(params, img, features), seq.visual_span
    )
    n = len(seq.ids)
    logits = T.matmul(T.narrow(h, 0, 0, n - 1), T.transpose(params.decoder.tok_emb))
    return logits.data.copy()
