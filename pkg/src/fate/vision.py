"""Two-stage prompt tuning on a frozen vision backbone.

Adaptation: two strong views per unlabeled image, ``[x_cls; DP; patches]``,
projected class tokens trained with a normalized-temperature contrastive loss
(only DP and the projector move). Classification: FixMatch over a fresh CP and
linear head, with the frozen DP attached to the weak and labeled branches but
not to the strong branch (unless ``dp_on_strong``).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .augment import STRONG, AugmentPolicy, augment_batch
from .data import BatchSampler, Dataset, SslSplit
from .layers import Linear, Module
from .optim import OptimizerState, sgd_step
from .tensor import Tape, Tensor
from .vit import PromptModel, PromptSet, VisionBackbone, trainable_parameters

log = logging.getLogger(__name__)

# augmentation view ids; each (sample, step, view) gets its own rng. Labeled
# draws repeat indices within a batch, so their view id also encodes the slot.
VIEW_A1, VIEW_A2, VIEW_LABELED, VIEW_WEAK, VIEW_STRONG = 0, 1, 2, 3, 4
N_VIEWS = 5


def labeled_views(n: int) -> np.ndarray:
    return VIEW_LABELED + N_VIEWS * (1 + np.arange(n))


class Projector(Module):
    """d -> d -> d_proj MLP used only while adapting DP."""

    def __init__(self, d: int, d_proj: int = 32, seed: int = 0, dtype=T.DEFAULT_DTYPE):
        rng = np.random.default_rng(seed)
        self.fc1 = Linear("projector.fc1", d, d, rng, dtype=dtype)
        self.fc2 = Linear("projector.fc2", d, d_proj, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))


class ClassifierHead(Module):
    def __init__(self, d: int, num_classes: int, seed: int = 0, dtype=T.DEFAULT_DTYPE):
        rng = np.random.default_rng(seed)
        self.fc = Linear("head", d, num_classes, rng, std=0.01, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc(x)


@dataclass
class AdaptationConfig:
    tau: float = 0.5
    epochs: int = 10
    lr: float = 0.03
    batch: int = 32             # mu * B unlabeled images per step
    n_dp: int = 12
    d_proj: int = 32
    policy: AugmentPolicy = field(default_factory=lambda: STRONG)

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class ClassificationConfig:
    theta: float = 0.95
    lam: float = 1.0
    B: int = 32
    mu: float = 1.0
    epochs: int = 50
    lr: float = 0.03
    n_cp: int = 12
    use_dp: bool = True
    use_cp: bool = True
    dp_on_strong: bool = False
    policy: AugmentPolicy = field(default_factory=lambda: STRONG)

    def __post_init__(self):
        if not 0.0 < self.theta:
            raise ValueError("threshold must be positive")
        if self.lam < 0:
            raise ValueError("unsupervised weight must be non-negative")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def nt_xent_loss(z1: Tensor, z2: Tensor, tau: float) -> Tensor:
    """Contrastive loss summed over all 2n anchors.

    Row i of ``z1`` and row i of ``z2`` are the two views of sample i. Each
    anchor's positive is its partner view; the softmax runs over the other
    2n - 1 views under cosine similarity / ``tau``.
    """
    n = z1.shape[0]
    if n < 1 or z2.shape[0] != n:
        raise ValueError("need two equally sized, non-empty view batches")
    z = T.l2_normalize(T.concat([z1, z2], axis=0))
    sim = T.scale(z @ T.transpose(z), 1.0 / tau)
    self_mask = np.where(np.eye(2 * n, dtype=bool), -1e9, 0.0).astype(z.dtype)
    logits = sim + Tensor(self_mask)
    partner = np.concatenate([np.arange(n, 2 * n), np.arange(n)])
    return T.nll_from_logits(logits, partner).sum()


def pseudo_label(q_w: np.ndarray, theta: float):
    """One-hot argmax of ``q_w`` (lowest index wins ties) and its confidence mask."""
    q_w = np.asarray(q_w)
    single = q_w.ndim == 1
    q = q_w[None] if single else q_w
    idx = np.argmax(q, axis=1)
    mask = (q.max(axis=1) >= theta).astype(q.dtype)
    onehot = np.eye(q.shape[1], dtype=q.dtype)[idx]
    if single:
        return onehot[0], float(mask[0])
    return onehot, mask


# ---------------------------------------------------------------------------
# forwards
# ---------------------------------------------------------------------------

def _cat_images(ds: Dataset, idx) -> np.ndarray:
    return ds.images[np.asarray(idx)]


def branch_prompts(dp, cp, with_dp: bool) -> list:
    out = []
    if with_dp and dp is not None:
        out.append(dp)
    if cp is not None:
        out.append(cp)
    return out


def classification_feature(tokens: Tensor, prompts: list, cp) -> Tensor:
    """Mean of the output CP tokens, or the output class token when CP is off."""
    if cp is None:
        return tokens[:, 0]
    start = 1 + sum(p.n for p in prompts if p is not cp)
    return T.mean(tokens[:, start:start + cp.n], axis=1)


def logits_for(backbone: VisionBackbone, images: np.ndarray, prompts: list, cp, head) -> Tensor:
    tokens = backbone.encode(images, prompts)
    return head(classification_feature(tokens, prompts, cp))


def adaptation_loss(backbone, dp, projector, view1: np.ndarray, view2: np.ndarray, tau: float) -> Tensor:
    n = len(view1)
    if n == 0:
        raise ValueError("empty adaptation batch")
    tokens = backbone.encode(np.concatenate([view1, view2]), [dp] if dp is not None else [])
    z = projector(tokens[:, 0])
    # the pair terms are summed over both directions, then averaged over samples
    return T.scale(nt_xent_loss(z[:n], z[n:], tau), 1.0 / n)


def adaptation_views(ds: Dataset, idx, epoch: int, seed: int, policy: AugmentPolicy = STRONG):
    imgs = _cat_images(ds, idx)
    return (augment_batch(imgs, idx, epoch, VIEW_A1, seed, "strong", policy),
            augment_batch(imgs, idx, epoch, VIEW_A2, seed, "strong", policy))


def adaptation_step(model: PromptModel, ds: Dataset, idx, opt: OptimizerState, cfg: AdaptationConfig,
                    epoch: int, seed: int) -> float:
    if len(idx) == 0:
        raise ValueError("empty adaptation batch")
    params = trainable_parameters(model, "vision-adapt")
    v1, v2 = adaptation_views(ds, idx, epoch, seed, cfg.policy)
    with Tape() as tape:
        loss = adaptation_loss(model.backbone, model.dp, model.projector, v1, v2, cfg.tau)
    grads = tape.backprop(loss)
    sgd_step(opt, grads, params)
    return loss.item()


@dataclass
class ClassificationInputs:
    x_l: np.ndarray
    y_l: np.ndarray
    u_w: np.ndarray
    u_s: np.ndarray
    pseudo: np.ndarray          # one-hot, detached
    mask: np.ndarray


def make_classification_inputs(model: PromptModel, ds: Dataset, batch, cfg: ClassificationConfig,
                               step: int, seed: int) -> ClassificationInputs:
    """Augment one batch pair and pseudo-label its weak view. ``step`` keys the rng."""
    lab = batch.labeled_idx
    x_l = augment_batch(_cat_images(ds, lab), lab, step, labeled_views(len(lab)), seed, "weak")
    u = _cat_images(ds, batch.unlabeled_idx)
    u_w = augment_batch(u, batch.unlabeled_idx, step, VIEW_WEAK, seed, "weak")
    u_s = augment_batch(u, batch.unlabeled_idx, step, VIEW_STRONG, seed, "strong", cfg.policy)
    dp = model.dp if cfg.use_dp else None
    cp = model.cp if cfg.use_cp else None
    weak_prompts = branch_prompts(dp, cp, True)
    # evaluated off-tape: the pseudo-labels carry no gradient
    if len(u_w):
        q_w = T.softmax(logits_for(model.backbone, u_w, weak_prompts, cp, model.head)).data
        pseudo, mask = pseudo_label(q_w, cfg.theta)
    else:
        pseudo = np.zeros((0, model.head.fc.w.shape[1]), np.float32)
        mask = np.zeros(0, np.float32)
    return ClassificationInputs(x_l, batch.labels, u_w, u_s, pseudo, mask)


def classification_losses(model: PromptModel, inp: ClassificationInputs, cfg: ClassificationConfig):
    """(L_s, L_u, L_total) as tensors; L_u averages over all mu*B terms."""
    dp = model.dp if cfg.use_dp else None
    cp = model.cp if cfg.use_cp else None
    weak_prompts = branch_prompts(dp, cp, True)
    strong_prompts = branch_prompts(dp, cp, cfg.dp_on_strong)
    logits_l = logits_for(model.backbone, inp.x_l, weak_prompts, cp, model.head)
    l_s = T.mean(T.nll_from_logits(logits_l, inp.y_l))
    ub = len(inp.u_s)
    if ub == 0:
        l_u = Tensor(np.zeros((), dtype=l_s.dtype))
    else:
        logits_s = logits_for(model.backbone, inp.u_s, strong_prompts, cp, model.head)
        per = T.nll_from_logits(logits_s, np.argmax(inp.pseudo, axis=1))
        l_u = T.scale(T.tsum(per * Tensor(inp.mask.astype(per.dtype))), 1.0 / ub)
    total = l_s + T.scale(l_u, cfg.lam)
    return l_s, l_u, total


def classification_step(model: PromptModel, ds: Dataset, batch, opt: OptimizerState,
                        cfg: ClassificationConfig, seed: int) -> dict:
    params = trainable_parameters(model, "vision-classify")
    inp = make_classification_inputs(model, ds, batch, cfg, opt.t, seed)
    with Tape() as tape:
        l_s, l_u, total = classification_losses(model, inp, cfg)
    grads = tape.backprop(total)
    lr = sgd_step(opt, grads, params)
    return dict(L_s=l_s.item(), L_u=l_u.item(), mask_rate=float(inp.mask.mean()) if len(inp.mask) else 0.0, lr=lr)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def predict_logits(model: PromptModel, images: np.ndarray, use_dp: bool = True, use_cp: bool = True,
                   chunk: int = 256) -> np.ndarray:
    dp = model.dp if use_dp else None
    cp = model.cp if use_cp else None
    prompts = branch_prompts(dp, cp, True)
    out = [logits_for(model.backbone, images[i:i + chunk], prompts, cp, model.head).data
           for i in range(0, len(images), chunk)]
    return np.concatenate(out) if out else np.zeros((0, 0))


def classify(model: PromptModel, images: np.ndarray, use_dp: bool = True, use_cp: bool = True) -> np.ndarray:
    """Argmax class for each image; no augmentation."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    return np.argmax(predict_logits(model, images, use_dp, use_cp), axis=1)


def accuracy(model: PromptModel, ds: Dataset, use_dp=True, use_cp=True) -> float:
    return float((classify(model, ds.images, use_dp, use_cp) == ds.labels).mean())


def features(model: PromptModel, images: np.ndarray, use_dp=True, use_cp=True, chunk=256) -> np.ndarray:
    dp = model.dp if use_dp else None
    cp = model.cp if use_cp else None
    prompts = branch_prompts(dp, cp, True)
    out = [classification_feature(model.backbone.encode(images[i:i + chunk], prompts), prompts, cp).data
           for i in range(0, len(images), chunk)]
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# stage loops
# ---------------------------------------------------------------------------

def run_adaptation(model: PromptModel, train: Dataset, split: SslSplit, cfg: AdaptationConfig, seed: int,
                   on_epoch=None) -> list[dict]:
    rng = np.random.default_rng([seed, 11])
    model.dp = PromptSet(cfg.n_dp, model.backbone.d, "DP", rng)
    model.projector = Projector(model.backbone.d, cfg.d_proj, seed=seed + 101)
    pool = split.unlabeled
    steps = max(1, len(pool) // cfg.batch)
    opt = OptimizerState(total_steps=cfg.epochs * steps, lr0=cfg.lr)
    rows = []
    for ep in range(cfg.epochs):
        t0 = time.perf_counter()
        perm = rng.permutation(pool)
        losses = []
        for s in range(steps):
            lr = opt.lr
            losses.append(adaptation_step(model, train, perm[s * cfg.batch:(s + 1) * cfg.batch], opt, cfg, ep, seed))
        row = dict(epoch=ep, stage="adapt", L_s=0.0, L_u=float(np.mean(losses)), mask_rate=0.0,
                   lr=lr, wall_seconds=time.perf_counter() - t0)
        rows.append(row)
        if on_epoch:
            on_epoch(row)
        log.info("adapt epoch %d loss %.4f", ep, row["L_u"])
    model.dp.set_trainable(False)
    model.projector = None
    return rows


def run_classification(model: PromptModel, train: Dataset, split: SslSplit, cfg: ClassificationConfig,
                       seed: int, test: Dataset | None = None, on_epoch=None, eval_every: int = 1) -> list[dict]:
    rng = np.random.default_rng([seed, 22])
    d = model.backbone.d
    if cfg.use_dp and model.dp is None:
        raise RuntimeError("classification with DP requested but no adapted DP is available")
    if model.dp is not None:
        model.dp.set_trainable(False)
    model.cp = PromptSet(cfg.n_cp, d, "CP", rng) if cfg.use_cp else None
    model.head = ClassifierHead(d, train.num_classes, seed=seed + 202)
    sampler = BatchSampler(split, train.labels, train.num_classes, cfg.B, cfg.mu, rng)
    steps = sampler.steps_per_epoch
    opt = OptimizerState(total_steps=cfg.epochs * steps, lr0=cfg.lr)
    rows = []
    for ep in range(cfg.epochs):
        t0 = time.perf_counter()
        stats = [classification_step(model, train, sampler.sample(), opt, cfg, seed) for _ in range(steps)]
        acc = float("nan")
        if test is not None and ((ep + 1) % eval_every == 0 or ep == cfg.epochs - 1):
            acc = accuracy(model, test, cfg.use_dp, cfg.use_cp)
        row = dict(epoch=ep, stage="classify",
                   L_s=float(np.mean([s["L_s"] for s in stats])),
                   L_u=float(np.mean([s["L_u"] for s in stats])),
                   mask_rate=float(np.mean([s["mask_rate"] for s in stats])),
                   lr=stats[-1]["lr"], test_accuracy=acc, wall_seconds=time.perf_counter() - t0)
        rows.append(row)
        if on_epoch:
            on_epoch(row)
        log.info("classify epoch %d L_s %.4f L_u %.4f mask %.3f acc %.4f", ep, row["L_s"], row["L_u"],
                 row["mask_rate"], acc)
    return rows
