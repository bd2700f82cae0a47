"""Vision-language FATE on a toy dual encoder.

Adaptation: zero-shot pseudo-label the unlabeled pool with the frozen dual
encoder, keep the k most confident images per class, and fit a visual DP by
cross-entropy on those pseudo-labels. Classification: learn a textual context
prompt with the FixMatch objective; the visual side only contributes frozen
features (with DP on the weak and labeled branches).
"""

from __future__ import annotations

import csv
import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import STRONG, AugmentPolicy, augment_batch, weak_augment
from .checkpoint import content_hash, load_tensors, save_tensors
from .data import BatchSampler, Dataset, SslSplit
from .layers import Linear, Module
from .optim import AdamState, OptimizerState, adamw_step, sgd_step
from .tensor import Tape, Tensor
from .text import TEMPLATE, ContextPrompt, TextEncoder, TokenTable, build_context_prompts, encode_class_prompts
from .vision import VIEW_STRONG, VIEW_WEAK, labeled_views, pseudo_label
from .vit import PromptModel, PromptSet, VisionBackbone, trainable_parameters

log = logging.getLogger(__name__)

DEFAULT_SCALE = 30.0
VIEW_XHAT = 7


class DualEncoder(Module):
    """Visual tower (ViT + linear projection) and text tower sharing a d-dim space."""

    def __init__(self, visual: VisionBackbone, text: TextEncoder, scale: float = DEFAULT_SCALE, seed: int = 0):
        rng = np.random.default_rng([seed, 5])
        self.visual = visual
        self.visual_proj = Linear("visual.proj", visual.d, text.d, rng, bias=False, dtype=visual.cls.dtype)
        self.text = text
        self.scale = float(scale)

    def freeze(self) -> "DualEncoder":
        self.set_trainable(False)
        self.visual.frozen = True
        return self

    def model(self) -> PromptModel:
        """A fresh prompt model over this (frozen) dual encoder."""
        return PromptModel(backbone=self.visual, visual_proj=self.visual_proj, text_encoder=self.text,
                           extras=dict(scale=self.scale))


def image_features(model: PromptModel, images: np.ndarray, dp=None) -> Tensor:
    tokens = model.backbone.encode(images, [dp] if dp is not None else [])
    return T.l2_normalize(model.visual_proj(tokens[:, 0]))


def image_features_np(model: PromptModel, images: np.ndarray, dp=None, chunk: int = 256) -> np.ndarray:
    out = [image_features(model, images[i:i + chunk], dp).data for i in range(0, len(images), chunk)]
    return np.concatenate(out) if out else np.zeros((0, model.visual_proj.w.shape[1]), np.float32)


def similarity_logits(v, f, scale: float):
    """``scale * <v, f>`` row-wise; works on tensors (taped) or arrays."""
    if isinstance(v, Tensor) or isinstance(f, Tensor):
        v = v if isinstance(v, Tensor) else Tensor(v)
        f = f if isinstance(f, Tensor) else Tensor(f)
        return T.scale(v @ T.transpose(f), scale)
    return scale * (np.asarray(v) @ np.asarray(f).T)


# ---------------------------------------------------------------------------
# toy dual-encoder pretraining
# ---------------------------------------------------------------------------

def vocabulary(*name_lists) -> list[str]:
    words = list(TEMPLATE)
    for names in name_lists:
        for nm in names:
            words.extend(nm.split())
    return words


def pretrain_dual_encoder(aux: Dataset, downstream_classes, *, backbone: VisionBackbone | None = None,
                          d: int = 64, d_text: int = 64, text_depth: int = 2, heads: int = 4, length: int = 32,
                          epochs: int = 8, batch: int = 64, lr: float = 2e-3, weight_decay: float = 0.05,
                          scale: float = DEFAULT_SCALE, held_out: float = 0.15, seed: int = 0,
                          finetune_visual: bool = True, eval_sets: dict | None = None):
    """Align image and class-prompt features on the auxiliary classes.

    Each image's caption is its class prompt, so the image-to-text side of the
    usual symmetric contrastive loss reduces to cross-entropy over the
    auxiliary class prompts. ``backbone`` (optional) seeds the visual tower.
    Returns the frozen :class:`DualEncoder` and a report.
    """
    overlap = set(aux.class_names) & set(downstream_classes)
    if overlap:
        raise ValueError(f"auxiliary and downstream classes overlap: {sorted(overlap)}")
    rng = np.random.default_rng([seed, 17])
    cfg = backbone.config if backbone is not None else dict(image_size=aux.images.shape[1], patch=7,
                                                           channels=aux.images.shape[3], d=d, depth=4, heads=heads)
    visual = VisionBackbone(**cfg, seed=seed, prefix="visual")
    if backbone is not None:
        state = backbone.state_dict()
        visual.load_state_dict({"visual" + k[len(backbone.prefix):]: v for k, v in state.items()})
    table = TokenTable(vocabulary(aux.class_names, downstream_classes), d_text, length, rng)
    text = TextEncoder(table, d=visual.d, depth=text_depth, heads=heads, seed=seed)
    dual = DualEncoder(visual, text, scale, seed)
    dual.set_trainable(True)
    if not finetune_visual:
        visual.set_trainable(False)
    params = {k: p for k, p in dual.parameters().items() if p.trainable}

    order = rng.permutation(len(aux))
    n_test = max(1, int(round(held_out * len(aux))))
    test_idx, train_idx = order[:n_test], order[n_test:]
    steps = max(1, len(train_idx) // batch)
    opt = AdamState(epochs * steps, lr, warmup=steps, weight_decay=weight_decay)
    model = dual.model()
    t0 = time.perf_counter()
    for _ in range(epochs):
        perm = rng.permutation(train_idx)
        for s in range(steps):
            idx = perm[s * batch:(s + 1) * batch]
            imgs = np.stack([weak_augment(im, rng) for im in aux.images[idx]])
            with Tape() as tape:
                f = encode_class_prompts(text, aux.class_names)
                logits = similarity_logits(image_features(model, imgs), f, scale)
                loss = T.mean(T.nll_from_logits(logits, aux.labels[idx]))
            adamw_step(opt, tape.backprop(loss), params)
    dual.freeze()
    report = dict(seconds=time.perf_counter() - t0, epochs=epochs, aux_classes=list(aux.class_names),
                  held_out_accuracy=zero_shot_accuracy(model, aux.subset(test_idx)))
    for key, ds in (eval_sets or {}).items():
        report[f"{key}_zero_shot_accuracy"] = zero_shot_accuracy(model, ds)
    return dual, report


def save_dual_encoder(dual: DualEncoder, directory, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    state = dual.state_dict()
    save_tensors(directory / "dual.bin", state)
    manifest = dict(visual=dual.visual.config, text={k: v for k, v in dual.text.config.items()},
                    vocab=dual.text.table.vocab, scale=dual.scale, hash=content_hash(state))
    manifest.update(extra or {})
    (directory / "dual.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory / "dual.bin"


def load_dual_encoder(directory) -> DualEncoder:
    directory = Path(directory)
    manifest = json.loads((directory / "dual.json").read_text())
    visual = VisionBackbone(**manifest["visual"], prefix="visual")
    tc = manifest["text"]
    table = TokenTable(manifest["vocab"][1:], tc["d_text"], tc["length"])
    text = TextEncoder(table, d=tc["d"], depth=tc["depth"], heads=tc["heads"])
    dual = DualEncoder(visual, text, manifest["scale"])
    dual.load_state_dict(load_tensors(directory / "dual.bin"))
    return dual.freeze()


# ---------------------------------------------------------------------------
# zero-shot pseudo-labels and top-k selection
# ---------------------------------------------------------------------------

def class_features(model: PromptModel, names) -> np.ndarray:
    return encode_class_prompts(model.text_encoder, names).data


def zero_shot_pseudo_label(model: PromptModel, images: np.ndarray, f) -> tuple[np.ndarray, np.ndarray]:
    """Argmax class and max softmax confidence per image; no DP, no augmentation."""
    f = f.data if isinstance(f, Tensor) else np.asarray(f)
    logits = similarity_logits(image_features_np(model, images), f, model.extras.get("scale", DEFAULT_SCALE))
    probs = T.softmax(Tensor(logits)).data
    return np.argmax(probs, axis=1), probs.max(axis=1)


def zero_shot_accuracy(model: PromptModel, ds: Dataset) -> float:
    cls, _ = zero_shot_pseudo_label(model, ds.images, class_features(model, ds.class_names))
    return float((cls == ds.labels).mean())


@dataclass
class PseudoLabeledSet:
    indices: np.ndarray         # sample indices (into whatever pool was labeled)
    labels: np.ndarray
    confidences: np.ndarray
    k: int
    warnings: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.indices)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_index", "pseudo_class", "confidence"])
            for i, c, p in zip(self.indices, self.labels, self.confidences):
                w.writerow([int(i), int(c), repr(float(p))])


def read_pseudo_csv(path, k: int) -> PseudoLabeledSet:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return PseudoLabeledSet(np.array([int(r["sample_index"]) for r in rows], dtype=np.int64),
                            np.array([int(r["pseudo_class"]) for r in rows], dtype=np.int64),
                            np.array([float(r["confidence"]) for r in rows]), k)


def select_topk_per_class(classes, confidences, k: int, num_classes: int, indices=None) -> PseudoLabeledSet:
    """The k most confident samples of every pseudo-class; ties go to the lower index."""
    if k < 1:
        raise ValueError("k must be at least 1")
    classes = np.asarray(classes)
    confidences = np.asarray(confidences)
    indices = np.arange(len(classes)) if indices is None else np.asarray(indices)
    keep, notes = [], []
    for c in range(num_classes):
        members = np.flatnonzero(classes == c)
        order = members[np.lexsort((indices[members], -confidences[members]))]
        if len(order) < k:
            msg = f"class {c}: only {len(order)} pseudo-labeled candidates for k={k}"
            notes.append(msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
        keep.extend(order[:k].tolist())
    keep = np.array(keep, dtype=np.int64)
    return PseudoLabeledSet(indices[keep], classes[keep].astype(np.int64), confidences[keep], k, notes)


# ---------------------------------------------------------------------------
# adaptation stage
# ---------------------------------------------------------------------------

@dataclass
class ClipAdaptationConfig:
    epochs: int = 20
    lr: float = 0.1
    n_dp: int = 12
    k: int = 16
    batch: int = 32
    augment: bool = True


def clip_dp_adaptation_loss(model: PromptModel, images: np.ndarray, labels: np.ndarray, f) -> Tensor:
    """Mean cross-entropy of ``s * <x_cls(with DP), f>`` against the pseudo-labels."""
    if len(images) == 0:
        raise ValueError("empty pseudo-labeled batch")
    f = f if isinstance(f, Tensor) else Tensor(np.asarray(f))
    logits = similarity_logits(image_features(model, images, model.dp), f, model.extras.get("scale", DEFAULT_SCALE))
    return T.mean(T.nll_from_logits(logits, labels))


def clip_dp_adaptation_step(model: PromptModel, images, labels, f, opt: OptimizerState) -> float:
    params = trainable_parameters(model, "vl-adapt")
    with Tape() as tape:
        loss = clip_dp_adaptation_loss(model, images, labels, f)
    sgd_step(opt, tape.backprop(loss), params)
    return loss.item()


def run_clip_adaptation(model: PromptModel, train: Dataset, split: SslSplit, cfg: ClipAdaptationConfig, seed: int,
                        on_epoch=None, xhat_csv=None) -> tuple[list[dict], PseudoLabeledSet]:
    rng = np.random.default_rng([seed, 33])
    names = train.class_names
    f = class_features(model, names)
    pool = split.unlabeled
    cls, conf = zero_shot_pseudo_label(model, train.images[pool], f)
    xhat = select_topk_per_class(cls, conf, cfg.k, len(names), indices=pool)
    if xhat_csv is not None:
        xhat.to_csv(xhat_csv)
    model.dp = PromptSet(cfg.n_dp, model.backbone.d, "DP", rng) if cfg.n_dp > 0 else None
    rows = []
    if model.dp is None or cfg.epochs == 0:
        return rows, xhat
    if len(xhat) == 0:
        raise ValueError("no pseudo-labeled samples to adapt on")
    steps = max(1, -(-len(xhat) // cfg.batch))
    opt = OptimizerState(total_steps=cfg.epochs * steps, lr0=cfg.lr)
    for ep in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(xhat))
        losses = []
        for s in range(steps):
            sel = order[s * cfg.batch:(s + 1) * cfg.batch]
            idx = xhat.indices[sel]
            imgs = train.images[idx]
            if cfg.augment:
                imgs = augment_batch(imgs, idx, ep, VIEW_XHAT, seed, "weak")
            lr = opt.lr
            losses.append(clip_dp_adaptation_step(model, imgs, xhat.labels[sel], f, opt))
        row = dict(epoch=ep, stage="adapt", L_s=float(np.mean(losses)), L_u=0.0, mask_rate=0.0, lr=lr,
                   wall_seconds=time.perf_counter() - t0)
        rows.append(row)
        if on_epoch:
            on_epoch(row)
    model.dp.set_trainable(False)
    return rows, xhat


# ---------------------------------------------------------------------------
# classification stage
# ---------------------------------------------------------------------------

@dataclass
class ClipClassificationConfig:
    theta: float = 0.95
    lam: float = 1.0
    B: int = 4
    mu: float = 16.0
    epochs: int = 20
    lr: float = 0.0025
    n_cp: int = 16
    use_dp: bool = True
    use_cp: bool = True
    dp_on_strong: bool = False
    ctx_init: str = "random"        # or "template"
    policy: AugmentPolicy = field(default_factory=lambda: STRONG)


@dataclass
class ClipClassificationInputs:
    v_l: np.ndarray
    y_l: np.ndarray
    v_s: np.ndarray
    pseudo: np.ndarray
    mask: np.ndarray


def text_features(model: PromptModel, names) -> Tensor:
    """f' when a context prompt is present, else the fixed-template f."""
    if model.text_ctx is not None:
        return build_context_prompts(model.text_encoder, model.text_ctx, names)[1]
    return encode_class_prompts(model.text_encoder, names)


def make_clip_classification_inputs(model: PromptModel, ds: Dataset, batch, cfg: ClipClassificationConfig,
                                    step: int, seed: int) -> ClipClassificationInputs:
    dp = model.dp if cfg.use_dp else None
    lab = batch.labeled_idx
    x_l = augment_batch(ds.images[lab], lab, step, labeled_views(len(lab)), seed, "weak")
    u = ds.images[batch.unlabeled_idx]
    u_w = augment_batch(u, batch.unlabeled_idx, step, VIEW_WEAK, seed, "weak")
    u_s = augment_batch(u, batch.unlabeled_idx, step, VIEW_STRONG, seed, "strong", cfg.policy)
    # the visual side is frozen here, so all image features are plain arrays
    v_l = image_features_np(model, x_l, dp)
    v_w = image_features_np(model, u_w, dp)
    v_s = image_features_np(model, u_s, dp if cfg.dp_on_strong else None)
    f = text_features(model, ds.class_names).data
    q_w = T.softmax(Tensor(similarity_logits(v_w, f, model.extras.get("scale", DEFAULT_SCALE)))).data
    pseudo, mask = pseudo_label(q_w, cfg.theta)
    return ClipClassificationInputs(v_l, batch.labels, v_s, pseudo, mask)


def clip_classification_losses(model: PromptModel, inp: ClipClassificationInputs, names,
                               cfg: ClipClassificationConfig):
    s = model.extras.get("scale", DEFAULT_SCALE)
    f = text_features(model, names)
    l_s = T.mean(T.nll_from_logits(similarity_logits(Tensor(inp.v_l), f, s), inp.y_l))
    ub = len(inp.v_s)
    if ub == 0:
        l_u = Tensor(np.zeros((), dtype=l_s.dtype))
    else:
        per = T.nll_from_logits(similarity_logits(Tensor(inp.v_s), f, s), np.argmax(inp.pseudo, axis=1))
        l_u = T.scale(T.tsum(per * Tensor(inp.mask.astype(per.dtype))), 1.0 / ub)
    return l_s, l_u, l_s + T.scale(l_u, cfg.lam)


def clip_classification_step(model: PromptModel, ds: Dataset, batch, opt: OptimizerState,
                             cfg: ClipClassificationConfig, seed: int) -> dict:
    params = trainable_parameters(model, "vl-classify")
    inp = make_clip_classification_inputs(model, ds, batch, cfg, opt.t, seed)
    with Tape() as tape:
        l_s, l_u, total = clip_classification_losses(model, inp, ds.class_names, cfg)
    lr = sgd_step(opt, tape.backprop(total), params)
    return dict(L_s=l_s.item(), L_u=l_u.item(), mask_rate=float(inp.mask.mean()) if len(inp.mask) else 0.0, lr=lr)


def clip_logits(model: PromptModel, images: np.ndarray, names, use_dp: bool = True) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    v = image_features_np(model, images, model.dp if use_dp else None)
    return similarity_logits(v, text_features(model, names).data, model.extras.get("scale", DEFAULT_SCALE))


def clip_classify(model: PromptModel, images: np.ndarray, names, use_dp: bool = True) -> np.ndarray:
    return np.argmax(clip_logits(model, images, names, use_dp), axis=1)


def clip_accuracy(model: PromptModel, ds: Dataset, use_dp: bool = True) -> float:
    return float((clip_classify(model, ds.images, ds.class_names, use_dp) == ds.labels).mean())


def run_clip_classification(model: PromptModel, train: Dataset, split: SslSplit, cfg: ClipClassificationConfig,
                            seed: int, test: Dataset | None = None, on_epoch=None, eval_every: int = 1) -> list[dict]:
    rng = np.random.default_rng([seed, 44])
    if cfg.use_dp and model.dp is None:
        raise RuntimeError("classification with DP requested but no adapted DP is available")
    if not cfg.use_dp:
        model.dp = None
    if model.dp is not None:
        model.dp.set_trainable(False)
    if not cfg.use_cp:
        model.text_ctx = None
        return []
    if cfg.ctx_init == "template":
        model.text_ctx = ContextPrompt.from_words(model.text_encoder.table)
    elif cfg.ctx_init == "random":
        model.text_ctx = ContextPrompt(cfg.n_cp, model.text_encoder.table.d_text, rng)
    else:
        raise ValueError(f"unknown context init {cfg.ctx_init!r}")
    sampler = BatchSampler(split, train.labels, train.num_classes, cfg.B, cfg.mu, rng)
    steps = sampler.steps_per_epoch
    opt = OptimizerState(total_steps=cfg.epochs * steps, lr0=cfg.lr)
    rows = []
    for ep in range(cfg.epochs):
        t0 = time.perf_counter()
        stats = [clip_classification_step(model, train, sampler.sample(), opt, cfg, seed) for _ in range(steps)]
        acc = float("nan")
        if test is not None and ((ep + 1) % eval_every == 0 or ep == cfg.epochs - 1):
            acc = clip_accuracy(model, test, use_dp=model.dp is not None)
        row = dict(epoch=ep, stage="classify",
                   L_s=float(np.mean([s["L_s"] for s in stats])),
                   L_u=float(np.mean([s["L_u"] for s in stats])),
                   mask_rate=float(np.mean([s["mask_rate"] for s in stats])),
                   lr=stats[-1]["lr"], test_accuracy=acc, wall_seconds=time.perf_counter() - t0)
        rows.append(row)
        if on_epoch:
            on_epoch(row)
    return rows
