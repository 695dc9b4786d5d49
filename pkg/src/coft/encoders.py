"""Frozen embedding provider plus every learnable adaptation piece.

The frozen backbone is a precomputed table: L2-normalized image embeddings,
one normalized anchor per class, and a fixed random linear mixer that maps
learnable context vectors into embedding space. On top of it live:

  * PromptBank    - positive/negative context stacks composed into per-class
                    text embeddings (mean of context rows -> mixer -> + anchor
                    -> renormalize)
  * VisualAdapter - low-rank residual over a frozen image embedding,
                    renormalized; exact identity while its up-projection is 0
  * FFTEncoder    - residual two-layer MLP over raw embeddings plus a linear
                    class head; exact identity perturbation at init

Each forward returns a cache; the matching ``*_backward`` consumes the
upstream gradient and accumulates into the owning ParamTensors, so losses can
be assembled by chaining. Gradients are hand-derived; tests verify them
against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import SeededRng, as_f64, normalize_rows
from .errors import DomainError, ShapeError
from .grad import ParamTensor, accumulate_grad, param

__all__ = [
    "FrozenProvider",
    "PromptBank",
    "init_prompt_bank",
    "compose_text",
    "compose_texts",
    "compose_texts_backward",
    "VisualAdapter",
    "init_visual_adapter",
    "adapt_visual",
    "adapt_batch",
    "adapt_batch_backward",
    "FFTEncoder",
    "init_fft_encoder",
    "clone_encoder_values",
    "encode_batch",
    "encode_batch_backward",
    "fft_logits",
    "logits_batch",
    "logits_batch_backward",
]

_NORM_TOL = 1e-9


class FrozenProvider:
    """Immutable frozen-backbone stand-in shared by every model in a run.

    Rows of both tables are re-normalized at construction so downstream code
    can rely on exactly unit-norm inputs; inputs further than 1e-9 from unit
    norm are rejected as corrupt rather than silently fixed.
    """

    def __init__(self, image_embeddings, class_anchors, mixer):
        emb = as_f64(image_embeddings)
        anchors = as_f64(class_anchors)
        mixer = as_f64(mixer)
        if emb.ndim != 2 or anchors.ndim != 2:
            raise ShapeError("embeddings and anchors must be 2-D tables")
        if emb.shape[1] != anchors.shape[1]:
            raise ShapeError(
                f"embedding dim {emb.shape[1]} != anchor dim {anchors.shape[1]}"
            )
        if mixer.ndim != 2 or mixer.shape[0] != emb.shape[1]:
            raise ShapeError("mixer must map ctx_dim -> embedding dim")
        for name, table in (("image embedding", emb), ("class anchor", anchors)):
            norms = np.linalg.norm(table, axis=1)
            if np.any(np.abs(norms - 1.0) > _NORM_TOL):
                worst = int(np.argmax(np.abs(norms - 1.0)))
                raise DomainError(f"{name} row {worst} is not unit-norm (|v|={norms[worst]!r})")
        self._embeddings = normalize_rows(emb)
        self._anchors = normalize_rows(anchors)
        self._mixer = mixer.copy()
        for arr in (self._embeddings, self._anchors, self._mixer):
            arr.setflags(write=False)

    @classmethod
    def build(cls, image_embeddings, class_anchors, rng: SeededRng, ctx_dim=None):
        """Construct with a mixer drawn from the run's ``provider/mixer`` stream."""
        dim = np.asarray(image_embeddings).shape[1]
        ctx_dim = dim if ctx_dim is None else int(ctx_dim)
        mixer = rng.stream("provider/mixer").normal((dim, ctx_dim), scale=1.0 / np.sqrt(ctx_dim))
        return cls(image_embeddings, class_anchors, mixer)

    @property
    def image_embeddings(self) -> np.ndarray:
        return self._embeddings

    @property
    def class_anchors(self) -> np.ndarray:
        return self._anchors

    @property
    def mixer(self) -> np.ndarray:
        return self._mixer

    @property
    def num_samples(self) -> int:
        return self._embeddings.shape[0]

    @property
    def num_classes(self) -> int:
        return self._anchors.shape[0]

    @property
    def dim(self) -> int:
        return self._embeddings.shape[1]

    @property
    def ctx_dim(self) -> int:
        return self._mixer.shape[1]

    def embedding(self, sample_id: int) -> np.ndarray:
        if not 0 <= sample_id < self.num_samples:
            raise KeyError(f"unknown sample_id {sample_id}")
        return self._embeddings[sample_id]


# ---------------------------------------------------------------------------
# Prompt bank
# ---------------------------------------------------------------------------

@dataclass
class PromptBank:
    """Learnable positive and negative context stacks, shape (M, ctx_dim) each.

    The per-class anchors are read from the shared provider; only the two
    context stacks train.
    """

    pos_context: ParamTensor
    neg_context: ParamTensor

    @property
    def context_len(self) -> int:
        return self.pos_context.value.shape[0]

    def params(self):
        return [self.pos_context, self.neg_context]

    def _context(self, polarity: str) -> ParamTensor:
        if polarity == "positive":
            return self.pos_context
        if polarity == "negative":
            return self.neg_context
        raise DomainError(f"polarity must be 'positive' or 'negative', got {polarity!r}")


def init_prompt_bank(provider: FrozenProvider, rng: SeededRng, context_len: int = 4,
                     sigma: float = 0.02, name_prefix: str = "") -> PromptBank:
    """Fresh bank with Gaussian contexts from distinct pos/neg streams."""
    shape = (context_len, provider.ctx_dim)
    pos = rng.stream("pos_context").normal(shape, scale=sigma)
    neg = rng.stream("neg_context").normal(shape, scale=sigma)
    return PromptBank(
        pos_context=param(name_prefix + "pos_context", pos),
        neg_context=param(name_prefix + "neg_context", neg),
    )


@dataclass
class _ComposeCache:
    context: ParamTensor
    mixer: np.ndarray
    texts: np.ndarray   # (C, d) normalized
    norms: np.ndarray   # (C,) pre-normalization row norms


def compose_texts(bank: PromptBank, provider: FrozenProvider, polarity: str):
    """Text embeddings for every class: normalize(mixer @ mean(ctx) + anchor_k).

    Returns (texts (C, d), cache for the backward pass).
    """
    ctx = bank._context(polarity)
    mean_ctx = ctx.value.mean(axis=0)
    shift = provider.mixer @ mean_ctx
    pre = provider.class_anchors + shift[None, :]
    norms = np.linalg.norm(pre, axis=1)
    if np.any(norms == 0.0):
        raise DomainError("composed text embedding collapsed to zero norm")
    texts = pre / norms[:, None]
    return texts, _ComposeCache(context=ctx, mixer=provider.mixer, texts=texts, norms=norms)


def compose_texts_backward(cache: _ComposeCache, d_texts) -> np.ndarray:
    """Accumulate d(loss)/d(context) given d(loss)/d(texts); returns the contribution."""
    d_texts = as_f64(d_texts)
    t = cache.texts
    # back through row-wise normalize: (g - (g.t) t) / |pre|
    proj = np.sum(d_texts * t, axis=1, keepdims=True)
    d_pre = (d_texts - proj * t) / cache.norms[:, None]
    d_shift = d_pre.sum(axis=0)
    d_mean = cache.mixer.T @ d_shift
    m = cache.context.value.shape[0]
    contribution = np.tile(d_mean / m, (m, 1))
    accumulate_grad(cache.context, contribution)
    return contribution


def compose_text(bank: PromptBank, provider: FrozenProvider, polarity: str,
                 class_id: int) -> np.ndarray:
    """Single-class text embedding (differentiable w.r.t. the context rows)."""
    if not 0 <= class_id < provider.num_classes:
        raise IndexError(f"class_id {class_id} out of range [0, {provider.num_classes})")
    texts, _ = compose_texts(bank, provider, polarity)
    return texts[class_id]


# ---------------------------------------------------------------------------
# Visual adapter
# ---------------------------------------------------------------------------

@dataclass
class VisualAdapter:
    """Low-rank residual over a frozen embedding, renormalized.

    adapted(e) = normalize(e + scale * up @ tanh(down @ e)); exactly the
    identity while ``up`` is all zero or ``scale`` is 0.
    """

    down: ParamTensor  # (rank, d)
    up: ParamTensor    # (d, rank)
    scale: float

    @property
    def rank(self) -> int:
        return self.down.value.shape[0]

    def params(self):
        return [self.down, self.up]

    def is_identity(self) -> bool:
        return self.scale == 0.0 or not np.any(self.up.value)


def init_visual_adapter(dim: int, rank: int, scale: float, rng: SeededRng,
                        sigma: float = 0.02, name_prefix: str = "") -> VisualAdapter:
    """Zero up-projection at init so adaptation starts from the exact identity."""
    down = rng.stream("adapter_down").normal((rank, dim), scale=sigma)
    return VisualAdapter(
        down=param(name_prefix + "adapter_down", down),
        up=param(name_prefix + "adapter_up", np.zeros((dim, rank))),
        scale=float(scale),
    )


@dataclass
class _AdaptCache:
    adapter: VisualAdapter
    base: np.ndarray     # (n, d)
    hidden: np.ndarray   # (n, rank) post-tanh
    adapted: np.ndarray  # (n, d) normalized
    norms: np.ndarray    # (n,)


def adapt_batch(adapter: VisualAdapter, base):
    """Adapt a batch of frozen embeddings; returns (adapted, cache)."""
    e = as_f64(base)
    if e.ndim != 2:
        raise ShapeError(f"expected a batch (n, d), got shape {e.shape}")
    if e.shape[1] != adapter.down.value.shape[1]:
        raise ShapeError(
            f"embedding dim {e.shape[1]} != adapter dim {adapter.down.value.shape[1]}"
        )
    hidden = np.tanh(e @ adapter.down.value.T)
    if adapter.is_identity():
        # exact identity contract: no renormalization of already-unit rows
        adapted = e.copy()
        norms = np.linalg.norm(e, axis=1)
    else:
        z = e + adapter.scale * (hidden @ adapter.up.value.T)
        norms = np.linalg.norm(z, axis=1)
        if np.any(norms == 0.0):
            raise DomainError("adapted embedding collapsed to zero norm")
        adapted = z / norms[:, None]
    return adapted, _AdaptCache(adapter=adapter, base=e, hidden=hidden,
                                adapted=adapted, norms=norms)


def adapt_batch_backward(cache: _AdaptCache, d_adapted):
    """Accumulate gradients into the adapter; returns (d_down, d_up) contributions."""
    g = as_f64(d_adapted)
    v = cache.adapted
    proj = np.sum(g * v, axis=1, keepdims=True)
    dz = (g - proj * v) / cache.norms[:, None]
    s = cache.adapter.scale
    d_up = s * (dz.T @ cache.hidden)
    d_hidden = s * (dz @ cache.adapter.up.value)
    d_pre = d_hidden * (1.0 - cache.hidden**2)
    d_down = d_pre.T @ cache.base
    accumulate_grad(cache.adapter.down, d_down)
    accumulate_grad(cache.adapter.up, d_up)
    return d_down, d_up


def adapt_visual(adapter: VisualAdapter, base) -> np.ndarray:
    """Single-vector adaptation."""
    v = as_f64(base)
    if v.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {v.shape}")
    adapted, _ = adapt_batch(adapter, v[None, :])
    return adapted[0]


# ---------------------------------------------------------------------------
# Trainable encoder + classifier head for the full fine-tuning phase
# ---------------------------------------------------------------------------

@dataclass
class FFTEncoder:
    """Residual MLP over raw frozen embeddings plus a linear class head.

    encode(x)  = x + w2 @ tanh(w1 @ x + b1) + b2
    logits(x)  = w_fc @ encode(x) + b_fc

    Zero-initializing w2/b2 and the head makes the encoder an exact identity
    and the initial class distribution uniform.
    """

    w1: ParamTensor    # (hidden, d)
    b1: ParamTensor    # (hidden,)
    w2: ParamTensor    # (d, hidden)
    b2: ParamTensor    # (d,)
    w_fc: ParamTensor  # (C, d)
    b_fc: ParamTensor  # (C,)

    @property
    def dim(self) -> int:
        return self.w1.value.shape[1]

    @property
    def num_classes(self) -> int:
        return self.w_fc.value.shape[0]

    def params(self):
        return [self.w1, self.b1, self.w2, self.b2, self.w_fc, self.b_fc]

    def encoder_params(self):
        return [self.w1, self.b1, self.w2, self.b2]


def init_fft_encoder(dim: int, num_classes: int, hidden: int, rng: SeededRng,
                     name_prefix: str = "") -> FFTEncoder:
    w1 = rng.stream("fft_w1").normal((hidden, dim), scale=1.0)
    return FFTEncoder(
        w1=param(name_prefix + "fft_w1", w1),
        b1=param(name_prefix + "fft_b1", np.zeros(hidden)),
        w2=param(name_prefix + "fft_w2", np.zeros((dim, hidden))),
        b2=param(name_prefix + "fft_b2", np.zeros(dim)),
        w_fc=param(name_prefix + "fft_w_fc", np.zeros((num_classes, dim))),
        b_fc=param(name_prefix + "fft_b_fc", np.zeros(num_classes)),
    )


def clone_encoder_values(enc: FFTEncoder, name_prefix: str) -> FFTEncoder:
    """Deep copy of parameter values (fresh grads); used for the momentum twin."""
    return FFTEncoder(*[param(name_prefix + p.name, p.value.copy()) for p in enc.params()])


@dataclass
class _EncodeCache:
    enc: FFTEncoder
    x: np.ndarray
    hidden: np.ndarray
    encoded: np.ndarray


def encode_batch(enc: FFTEncoder, x):
    """Residual MLP forward; returns (encoded (n, d), cache)."""
    x = as_f64(x)
    if x.ndim != 2:
        raise ShapeError(f"expected a batch (n, d), got shape {x.shape}")
    if x.shape[1] != enc.dim:
        raise ShapeError(f"input dim {x.shape[1]} != encoder dim {enc.dim}")
    hidden = np.tanh(x @ enc.w1.value.T + enc.b1.value)
    encoded = x + hidden @ enc.w2.value.T + enc.b2.value
    return encoded, _EncodeCache(enc=enc, x=x, hidden=hidden, encoded=encoded)


def encode_batch_backward(cache: _EncodeCache, d_encoded, need_dx: bool = False):
    """Accumulate encoder grads; optionally return d(loss)/d(input)."""
    g = as_f64(d_encoded)
    enc = cache.enc
    accumulate_grad(enc.w2, g.T @ cache.hidden)
    accumulate_grad(enc.b2, g.sum(axis=0))
    d_hidden = g @ enc.w2.value
    d_pre = d_hidden * (1.0 - cache.hidden**2)
    accumulate_grad(enc.w1, d_pre.T @ cache.x)
    accumulate_grad(enc.b1, d_pre.sum(axis=0))
    if need_dx:
        return g + d_pre @ enc.w1.value
    return None


@dataclass
class _LogitsCache:
    enc: FFTEncoder
    encode_cache: _EncodeCache


def logits_batch(enc: FFTEncoder, x):
    """Class logits w_fc @ encode(x) + b_fc; returns (logits (n, C), cache)."""
    encoded, ecache = encode_batch(enc, x)
    logits = encoded @ enc.w_fc.value.T + enc.b_fc.value
    return logits, _LogitsCache(enc=enc, encode_cache=ecache)


def logits_batch_backward(cache: _LogitsCache, d_logits) -> None:
    g = as_f64(d_logits)
    enc = cache.enc
    accumulate_grad(enc.w_fc, g.T @ cache.encode_cache.encoded)
    accumulate_grad(enc.b_fc, g.sum(axis=0))
    d_encoded = g @ enc.w_fc.value
    encode_batch_backward(cache.encode_cache, d_encoded)


def fft_logits(enc: FFTEncoder, base) -> np.ndarray:
    """Single-vector logits."""
    v = as_f64(base)
    if v.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {v.shape}")
    logits, _ = logits_batch(enc, v[None, :])
    return logits[0]
