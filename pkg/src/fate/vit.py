"""Miniature Vision Transformer with prompt insertion.

Token order is always ``[x_cls; DP; CP; patches]``. Only image patches carry a
positional embedding, so permuting the rows of a prompt set permutes the
matching output rows and nothing else.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import content_hash, load_tensors, save_tensors
from .layers import Block, LayerNorm, Linear, Module, _init
from .optim import AdamState, OptimizerState, adamw_step, sgd_step
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

PROMPT_INIT_STD = 0.02


class PatchEmbedder(Module):
    def __init__(self, image_size: int, patch: int, channels: int, d: int,
                 rng: np.random.Generator, prefix: str = "backbone", dtype=T.DEFAULT_DTYPE):
        if image_size % patch:
            raise ValueError(f"image size {image_size} not divisible by patch {patch}")
        self.image_size = image_size
        self.patch = patch
        self.channels = channels
        self.d = d
        self.m = (image_size // patch) ** 2
        self.proj = Linear(f"{prefix}.patch.proj", patch * patch * channels, d, rng, dtype=dtype)
        self.pos = Tensor.param(_init(rng, (self.m, d), 0.02, dtype), f"{prefix}.patch.pos", dtype=dtype)

    def patches(self, images: np.ndarray) -> np.ndarray:
        """(N, H, W, c) pixels -> (N, m, p*p*c) flattened patches, row-major."""
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        n, h, w, c = images.shape
        p = self.patch
        if h % p or w % p:
            raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
        if c != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {c}")
        x = images.reshape(n, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(n, (h // p) * (w // p), p * p * c)

    def __call__(self, images: np.ndarray) -> Tensor:
        flat = self.patches(images)
        if flat.shape[1] != self.m:
            raise ValueError(f"got {flat.shape[1]} patches, positional table has {self.m}")
        x = Tensor((flat - 0.5).astype(self.proj.w.dtype))
        return self.proj(x) + self.pos


class PromptSet(Module):
    """n learnable d-dim tokens tagged DP or CP."""

    def __init__(self, n: int, d: int, role: str, rng: np.random.Generator | None = None,
                 name: str | None = None, trainable: bool = True, init: np.ndarray | None = None,
                 dtype=T.DEFAULT_DTYPE):
        if role not in ("DP", "CP"):
            raise ValueError(f"role must be DP or CP, got {role!r}")
        if n < 1:
            raise ValueError("a prompt set needs at least one token")
        self.role = role
        if init is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            init = rng.normal(0.0, PROMPT_INIT_STD, size=(n, d))
        init = np.asarray(init)
        if init.shape != (n, d):
            raise ValueError(f"prompt init shape {init.shape} != {(n, d)}")
        self.tokens = Tensor.param(init, name or f"{role.lower()}.tokens", trainable=trainable, dtype=dtype)

    @property
    def n(self) -> int:
        return self.tokens.shape[0]

    @property
    def d(self) -> int:
        return self.tokens.shape[1]


class VisionBackbone(Module):
    def __init__(self, image_size: int = 28, patch: int = 7, channels: int = 1, d: int = 64,
                 depth: int = 4, heads: int = 4, seed: int = 0, prefix: str = "backbone",
                 dtype=T.DEFAULT_DTYPE):
        rng = np.random.default_rng(seed)
        self.config = dict(image_size=image_size, patch=patch, channels=channels, d=d,
                           depth=depth, heads=heads)
        self.prefix = prefix
        self.patch = PatchEmbedder(image_size, patch, channels, d, rng, prefix, dtype)
        self.cls = Tensor.param(_init(rng, (d,), 0.02, dtype), f"{prefix}.cls", dtype=dtype)
        self.blocks = [Block(f"{prefix}.blocks.{i}", d, heads, rng, dtype=dtype) for i in range(depth)]
        self.norm = LayerNorm(f"{prefix}.norm", d, dtype)
        self.frozen = False

    @property
    def d(self) -> int:
        return self.config["d"]

    @property
    def m(self) -> int:
        return self.patch.m

    def freeze(self) -> "VisionBackbone":
        self.set_trainable(False)
        self.frozen = True
        return self

    def embed_patches(self, images: np.ndarray) -> Tensor:
        return self.patch(images)

    def forward_tokens(self, prompts, E: Tensor, probe: list | None = None) -> Tensor:
        """Run ``[x_cls; prompts...; E]`` through the blocks.

        ``prompts`` is an ordered list of :class:`PromptSet` (or raw (n, d)
        tensors). Returns the normalized output sequence (N, 1 + sum n + m, d).
        """
        if E.ndim == 2:
            E = E.reshape(1, *E.shape)
        n, _, d = E.shape
        if d != self.d:
            raise ValueError(f"embedding dim {d} != backbone dim {self.d}")
        seq = [T.broadcast_to(self.cls.reshape(1, 1, d), (n, 1, d))]
        for ps in prompts:
            tok = ps.tokens if isinstance(ps, PromptSet) else ps
            if tok.ndim != 2 or tok.shape[1] != d:
                raise ValueError(f"prompt tokens {tok.shape} incompatible with dim {d}")
            seq.append(T.broadcast_to(tok.reshape(1, *tok.shape), (n, tok.shape[0], d)))
        seq.append(E)
        x = T.concat(seq, axis=1)
        for blk in self.blocks:
            x = blk(x, probe=probe)
        return self.norm(x)

    def encode(self, images: np.ndarray, prompts=(), probe=None) -> Tensor:
        return self.forward_tokens(list(prompts), self.embed_patches(images), probe=probe)

    def sequence_length(self, prompts=()) -> int:
        return 1 + sum((p.n if isinstance(p, PromptSet) else p.shape[0]) for p in prompts) + self.m


def embed_patches(backbone: VisionBackbone, image: np.ndarray) -> Tensor:
    return backbone.embed_patches(image)


def forward_tokens(backbone: VisionBackbone, prompts, E: Tensor) -> Tensor:
    return backbone.forward_tokens(prompts, E)


# ---------------------------------------------------------------------------
# stage-dependent trainable sets
# ---------------------------------------------------------------------------

STAGES = {
    "vision-adapt": ("dp", "projector"),
    "vision-classify": ("cp", "head"),
    "vl-adapt": ("dp",),
    "vl-classify": ("text_ctx",),
}


@dataclass
class PromptModel:
    """Everything a FATE run touches. Frozen parts are never returned as trainable."""

    backbone: VisionBackbone
    dp: PromptSet | None = None
    cp: PromptSet | None = None
    projector: Module | None = None
    head: Module | None = None
    text_encoder: Module | None = None
    text_ctx: Module | None = None
    visual_proj: Module | None = None
    extras: dict = field(default_factory=dict)

    def parts(self) -> dict[str, Module]:
        names = ("backbone", "visual_proj", "dp", "cp", "projector", "head", "text_encoder", "text_ctx")
        return {k: getattr(self, k) for k in names if getattr(self, k) is not None}

    def all_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for part in self.parts().values():
            out.update(part.parameters())
        return out


def trainable_parameters(model: PromptModel, stage: str) -> dict[str, Tensor]:
    """Mark exactly the stage's set trainable (everything else frozen) and return it."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {sorted(STAGES)}")
    wanted = STAGES[stage]
    out: dict[str, Tensor] = {}
    for key, part in model.parts().items():
        live = key in wanted
        part.set_trainable(live)
        if live:
            out.update(part.parameters())
    return out


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_backbone(backbone: VisionBackbone, directory, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    state = backbone.state_dict()
    save_tensors(directory / "backbone.bin", state)
    manifest = dict(backbone.config, prefix=backbone.prefix, hash=content_hash(state))
    manifest.update(extra or {})
    (directory / "backbone.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory / "backbone.bin"


def load_backbone(directory, dtype=T.DEFAULT_DTYPE) -> VisionBackbone:
    directory = Path(directory)
    manifest_path = directory / "backbone.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no backbone manifest in {directory}")
    manifest = json.loads(manifest_path.read_text())
    keys = ("image_size", "patch", "channels", "d", "depth", "heads")
    bb = VisionBackbone(**{k: manifest[k] for k in keys}, prefix=manifest.get("prefix", "backbone"), dtype=dtype)
    bb.load_state_dict(load_tensors(directory / "backbone.bin"))
    return bb.freeze()


# ---------------------------------------------------------------------------
# desk-scale pretraining
# ---------------------------------------------------------------------------

def pretrain_backbone(aux, downstream_classes, *, image_size=None, patch=7, d=64, depth=4, heads=4,
                      epochs=25, batch=64, lr=2e-3, held_out=0.15, seed=0, augment=True,
                      optimizer="adamw", warmup_epochs=1, weight_decay=0.05, log_every=0):
    """Supervised pretraining on class-disjoint auxiliary data.

    ``aux`` is a :class:`fate.data.Dataset`; ``downstream_classes`` the class
    names of the target task, which must not overlap. Returns the frozen
    backbone and a report dict with held-out accuracy.
    """
    from .augment import weak_augment

    overlap = set(aux.class_names) & set(downstream_classes)
    if overlap:
        raise ValueError(f"auxiliary and downstream classes overlap: {sorted(overlap)}")
    rng = np.random.default_rng(seed)
    n = len(aux.labels)
    order = rng.permutation(n)
    n_test = max(1, int(round(held_out * n)))
    test_idx, train_idx = order[:n_test], order[n_test:]
    size = image_size or aux.images.shape[1]
    bb = VisionBackbone(size, patch, aux.images.shape[3], d, depth, heads, seed=seed)
    head = Linear("pretrain.head", d, aux.num_classes, rng)
    params = {**bb.parameters(), **head.parameters()}
    steps_per_epoch = max(1, len(train_idx) // batch)
    total = epochs * steps_per_epoch
    if optimizer == "adamw":
        opt = AdamState(total, lr, warmup=warmup_epochs * steps_per_epoch, weight_decay=weight_decay)
        step_fn = adamw_step
    elif optimizer == "sgd":
        opt = OptimizerState(total_steps=total, lr0=lr, weight_decay=weight_decay)
        step_fn = sgd_step
    else:
        raise ValueError(f"unknown optimizer {optimizer!r}")
    t0 = time.perf_counter()
    for ep in range(epochs):
        perm = rng.permutation(train_idx)
        for s in range(steps_per_epoch):
            idx = perm[s * batch:(s + 1) * batch]
            imgs = aux.images[idx]
            if augment:
                imgs = np.stack([weak_augment(im, rng) for im in imgs])
            with Tape() as tape:
                logits = head(bb.encode(imgs)[:, 0])
                loss = T.nll_from_logits(logits, aux.labels[idx]).mean()
            step_fn(opt, tape.backprop(loss), params)
            if log_every and opt.t % log_every == 0:
                log.info("pretrain step %d loss %.4f", opt.t, loss.item())
    pred = predict_linear(bb, head, aux.images[test_idx])
    truth = aux.labels[test_idx]
    acc = float((pred == truth).mean())
    fit_idx = train_idx[:len(test_idx)]
    train_acc = float((predict_linear(bb, head, aux.images[fit_idx]) == aux.labels[fit_idx]).mean())
    confusion = np.zeros((aux.num_classes, aux.num_classes), dtype=np.int64)
    np.add.at(confusion, (truth, pred), 1)
    bb.freeze()
    report = dict(held_out_accuracy=acc, train_accuracy=train_acc, aux_classes=list(aux.class_names), confusion=confusion.tolist(),
                  seconds=time.perf_counter() - t0, epochs=epochs)
    return bb, report


def predict_linear(bb: VisionBackbone, head: Linear, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = []
    for i in range(0, len(images), chunk):
        out.append(np.argmax(head(bb.encode(images[i:i + chunk])[:, 0]).data, axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
