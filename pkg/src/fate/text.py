"""Word-level toy text tower for the vision-language variant.

A class prompt is a row ``[context; name tokens; padding]`` of fixed length
``l``. The fixed template context is just the table embeddings of
"a photo of a", so a learnable context initialized to those rows goes through
exactly the same code path and yields bit-identical features.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import Block, LayerNorm, Linear, Module, _init
from .tensor import Tensor

PAD = "<pad>"
TEMPLATE = ("a", "photo", "of", "a")


class VocabularyError(KeyError):
    pass


class TokenTable(Module):
    """Closed vocabulary -> ids -> embedding rows. Id 0 is reserved for padding."""

    def __init__(self, words, d_text: int = 64, length: int = 32, rng: np.random.Generator | None = None,
                 prefix: str = "text", dtype=T.DEFAULT_DTYPE):
        vocab = [PAD]
        for w in words:
            if w != PAD and w not in vocab:
                vocab.append(w)
        self.vocab = vocab
        self.ids = {w: i for i, w in enumerate(vocab)}
        self.length = length
        rng = rng if rng is not None else np.random.default_rng(0)
        emb = _init(rng, (len(vocab), d_text), 0.02, dtype)
        emb[0] = 0.0
        self.embedding = Tensor.param(emb, f"{prefix}.token_embedding", dtype=dtype)

    @property
    def d_text(self) -> int:
        return self.embedding.shape[1]

    def tokenize(self, text: str) -> list[int]:
        words = text.split()
        if not words:
            raise VocabularyError(f"empty text {text!r}")
        missing = [w for w in words if w not in self.ids]
        if missing:
            raise VocabularyError(f"out-of-vocabulary word(s) {missing} in {text!r}")
        return [self.ids[w] for w in words]

    def embed(self, ids) -> Tensor:
        return self.embedding[np.asarray(ids, dtype=np.int64)]


class ContextPrompt(Module):
    """n_c learnable context rows shared by all class prompts."""

    def __init__(self, n: int, d_text: int, rng: np.random.Generator | None = None,
                 init: np.ndarray | None = None, trainable: bool = True, name: str = "text_ctx.tokens",
                 dtype=T.DEFAULT_DTYPE):
        if init is None:
            if n < 1:
                raise ValueError("a context prompt needs at least one token")
            rng = rng if rng is not None else np.random.default_rng(0)
            init = rng.normal(0.0, 0.02, size=(n, d_text))
        init = np.asarray(init)
        if init.shape != (n, d_text):
            raise ValueError(f"context init shape {init.shape} != {(n, d_text)}")
        self.tokens = Tensor.param(init, name, trainable=trainable, dtype=dtype)

    @property
    def n(self) -> int:
        return self.tokens.shape[0]

    @classmethod
    def from_words(cls, table: TokenTable, words=TEMPLATE, trainable: bool = True) -> "ContextPrompt":
        ids = table.tokenize(" ".join(words))
        init = table.embedding.data[ids].copy()
        return cls(len(ids), table.d_text, init=init, trainable=trainable, dtype=table.embedding.dtype)


class TextEncoder(Module):
    """Small transformer over prompt rows; feature = projected output at the last real token.

    There is no positional table: the context length changes between the
    fixed template and the learned prompt, and position-free encoding keeps
    the class-name tokens' treatment independent of where the context ends.
    """

    def __init__(self, table: TokenTable, d: int = 64, depth: int = 2, heads: int = 4, seed: int = 0,
                 prefix: str = "text", dtype=T.DEFAULT_DTYPE):
        rng = np.random.default_rng(seed)
        d_text = table.d_text
        self.table = table
        self.config = dict(d=d, depth=depth, heads=heads, d_text=d_text, length=table.length)
        self.blocks = [Block(f"{prefix}.blocks.{i}", d_text, heads, rng, dtype=dtype) for i in range(depth)]
        self.norm = LayerNorm(f"{prefix}.norm", d_text, dtype)
        self.proj = Linear(f"{prefix}.proj", d_text, d, rng, bias=False, dtype=dtype)

    @property
    def d(self) -> int:
        return self.config["d"]

    def freeze(self) -> "TextEncoder":
        self.set_trainable(False)
        return self

    def build(self, context: Tensor, names) -> tuple[Tensor, np.ndarray, np.ndarray]:
        """Assemble S' = [context; name; padding] for every class name.

        Returns the (Y, l, d_text) sequence tensor, the (Y, l) key mask and the
        index of each row's last real token.
        """
        names = list(names)
        if len(names) < 1:
            raise ValueError("need at least one class name")
        n_c = context.shape[0]
        ids = [self.table.tokenize(nm) for nm in names]
        longest = max(len(t) for t in ids)
        l = self.table.length
        if n_c + longest > l:
            raise ValueError(f"context of {n_c} plus a {longest}-token name exceeds length {l}")
        y = len(names)
        d_text = self.table.d_text
        pad_ids = np.zeros((y, l - n_c), dtype=np.int64)
        mask = np.zeros((y, l), dtype=bool)
        mask[:, :n_c] = True
        last = np.zeros(y, dtype=np.int64)
        for i, t in enumerate(ids):
            pad_ids[i, :len(t)] = t
            mask[i, n_c:n_c + len(t)] = True
            last[i] = n_c + len(t) - 1
        ctx = T.broadcast_to(context.reshape(1, n_c, d_text), (y, n_c, d_text))
        seq = T.concat([ctx, self.table.embed(pad_ids)], axis=1)
        return seq, mask, last

    def encode(self, seq: Tensor, mask: np.ndarray, last: np.ndarray) -> Tensor:
        x = seq
        for blk in self.blocks:
            x = blk(x, key_mask=mask)
        x = self.norm(x)
        picked = x[np.arange(x.shape[0]), last]
        return T.l2_normalize(self.proj(picked))

    def template_context(self, words=TEMPLATE) -> Tensor:
        ids = self.table.tokenize(" ".join(words))
        return Tensor(self.table.embedding.data[ids])


def encode_class_prompts(encoder: TextEncoder, names, template=TEMPLATE) -> Tensor:
    """f: unit-norm features of ``template + name`` for every class name."""
    names = list(names)
    if len(names) < 2:
        raise ValueError("need at least two class names")
    seq, mask, last = encoder.build(encoder.template_context(template), names)
    return encoder.encode(seq, mask, last)


def build_context_prompts(encoder: TextEncoder, ctx: ContextPrompt, names) -> tuple[Tensor, Tensor]:
    """(S', f') for a learnable context; gradient reaches only ``ctx.tokens``."""
    seq, mask, last = encoder.build(ctx.tokens, names)
    return seq, encoder.encode(seq, mask, last)
