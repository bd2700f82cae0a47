"""Seeded experiment runs and the comparison suites built on them."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from pathlib import Path

import numpy as np

from . import clip, toy, vision
from .checkpoint import content_hash, load_tensors, save_tensors
from .config import ExperimentConfig
from .data import Dataset, load_dataset, make_one_shot_split
from .text import ContextPrompt
from .vit import PromptModel, PromptSet, VisionBackbone, load_backbone, pretrain_backbone, save_backbone

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "stage", "L_s", "L_u", "mask_rate", "lr", "test_accuracy", "wall_seconds")


class HarnessError(RuntimeError):
    """Raised before any training when a run cannot start."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


# ---------------------------------------------------------------------------
# bookkeeping
# ---------------------------------------------------------------------------

def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    return str(value)


class MetricsLog:
    """Append-only metrics CSV; one row per epoch per stage."""

    def __init__(self, path, log_wall_time: bool = False, append: bool = False):
        self.path = Path(path)
        self.log_wall_time = log_wall_time
        if not (append and self.path.exists()):
            self.path.write_text(",".join(METRIC_COLUMNS) + "\n", encoding="utf-8")

    def __call__(self, row: dict) -> None:
        row = dict(row)
        if not self.log_wall_time:
            row["wall_seconds"] = None
        with open(self.path, "a", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerow([_cell(row.get(c)) for c in METRIC_COLUMNS])


def code_hash() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def data_hash(*datasets: Dataset) -> str:
    h = hashlib.sha256()
    for ds in datasets:
        h.update(np.ascontiguousarray(ds.images, dtype=np.float32).tobytes())
        h.update(ds.labels.astype("<i8").tobytes())
        h.update("\n".join(ds.class_names).encode())
    return h.hexdigest()


def write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def write_rows(path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("", encoding="utf-8")
        return
    cols = list(rows[0])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_cell(r.get(c)) for c in cols])


def mean_std(values) -> tuple[float, float]:
    """Mean and sample standard deviation (ddof=1; 0 for a single value)."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0


# ---------------------------------------------------------------------------
# data and checkpoints
# ---------------------------------------------------------------------------

def load_task(cfg: ExperimentConfig, need_aux: bool = False):
    """(aux or None, train, test) as configured."""
    if cfg.data_format == "toy":
        aux, train, test = toy.make_toy_task(cfg.toy_seed, cfg.aux_per_class, cfg.train_per_class,
                                            cfg.test_per_class, cfg.image_size)
        return (aux if need_aux else None), train, test
    paths = dict(train=cfg.train_path, test=cfg.test_path)
    if need_aux:
        paths["aux"] = cfg.aux_path
    for key, p in paths.items():
        if not p or not Path(p).exists():
            raise HarnessError("missing-dataset", f"{key}_path {p!r} does not exist")
    train = load_dataset(cfg.train_path, cfg.data_format)
    test = load_dataset(cfg.test_path, cfg.data_format)
    aux = load_dataset(cfg.aux_path, cfg.data_format) if need_aux else None
    return aux, train, test


def _require_checkpoint(cfg: ExperimentConfig) -> Path:
    d = Path(cfg.backbone_dir)
    want = d / ("dual.json" if cfg.variant == "vl" else "backbone.json")
    if not want.exists():
        raise HarnessError("missing-checkpoint",
                           f"{want} not found; run `fate pretrain-backbone` with this config first")
    return d


def load_frozen(cfg: ExperimentConfig):
    d = _require_checkpoint(cfg)
    return clip.load_dual_encoder(d) if cfg.variant == "vl" else load_backbone(d)


def pretrain(cfg: ExperimentConfig) -> dict:
    """Pretrain (and checkpoint) the frozen towers for ``cfg.variant``."""
    aux, train, test = load_task(cfg, need_aux=True)
    out = Path(cfg.backbone_dir)
    out.mkdir(parents=True, exist_ok=True)
    downstream = train.class_names
    if cfg.variant == "vision":
        bb, report = pretrain_backbone(aux, downstream, patch=cfg.patch, d=cfg.d, depth=cfg.depth,
                                       heads=cfg.heads, epochs=cfg.pretrain_epochs, lr=cfg.pretrain_lr,
                                       seed=cfg.seed)
        if report["held_out_accuracy"] < 0.9:
            log.warning("backbone held-out accuracy %.3f is below 0.90", report["held_out_accuracy"])
        save_backbone(bb, out, dict(aux_classes=list(aux.class_names),
                                    held_out_accuracy=report["held_out_accuracy"]))
    else:
        vision_dir = out / "vision"
        if (vision_dir / "backbone.json").exists():
            bb = load_backbone(vision_dir)
        else:
            bb, _ = pretrain_backbone(aux, downstream, patch=cfg.patch, d=cfg.d, depth=cfg.depth,
                                      heads=cfg.heads, epochs=cfg.pretrain_epochs, lr=cfg.pretrain_lr,
                                      seed=cfg.seed)
            save_backbone(bb, vision_dir, dict(aux_classes=list(aux.class_names)))
        dual, report = clip.pretrain_dual_encoder(aux, downstream, backbone=bb, d_text=cfg.d,
                                                  text_depth=cfg.text_depth, heads=cfg.heads,
                                                  length=cfg.text_length, epochs=cfg.dual_epochs,
                                                  scale=cfg.scale, seed=cfg.seed, eval_sets=dict(downstream=test))
        clip.save_dual_encoder(dual, out, dict(aux_classes=list(aux.class_names),
                                               held_out_accuracy=report["held_out_accuracy"]))
    report.pop("confusion", None)
    write_json(out / "pretrain_report.json", report)
    return report


def _dp_state(dp: PromptSet) -> dict:
    return {"dp.tokens": dp.tokens.data}


def _load_dp(path, d: int) -> PromptSet:
    state = load_tensors(path)
    tokens = state["dp.tokens"]
    return PromptSet(tokens.shape[0], d, "DP", init=tokens, trainable=False, dtype=tokens.dtype)


def noisy_dp(cfg: ExperimentConfig, d: int, seed: int) -> PromptSet:
    """A frozen DP drawn exactly like an untrained DP's initialization."""
    return PromptSet(cfg.n_dp, d, "DP", np.random.default_rng([seed, 11]), trainable=False)


# ---------------------------------------------------------------------------
# stage runners
# ---------------------------------------------------------------------------

def adaptation_config(cfg: ExperimentConfig) -> vision.AdaptationConfig:
    return vision.AdaptationConfig(tau=cfg.tau, epochs=cfg.adapt_epochs, lr=cfg.adapt_lr,
                                   batch=int(round(cfg.mu * cfg.B)), n_dp=cfg.n_dp, d_proj=cfg.d_proj,
                                   policy=cfg.adapt_policy())


def classification_config(cfg: ExperimentConfig, **over) -> vision.ClassificationConfig:
    kw = dict(theta=cfg.theta, lam=cfg.lam, B=cfg.B, mu=cfg.mu, epochs=cfg.cls_epochs, lr=cfg.cls_lr,
              n_cp=cfg.n_cp, use_dp=cfg.use_dp, use_cp=cfg.use_cp, dp_on_strong=cfg.dp_on_strong,
              policy=cfg.strong_policy())
    kw.update(over)
    return vision.ClassificationConfig(**kw)


def clip_adaptation_config(cfg: ExperimentConfig, **over) -> clip.ClipAdaptationConfig:
    kw = dict(epochs=cfg.adapt_epochs, lr=cfg.adapt_lr, n_dp=cfg.n_dp, k=cfg.k, batch=cfg.adapt_batch)
    kw.update(over)
    return clip.ClipAdaptationConfig(**kw)


def clip_classification_config(cfg: ExperimentConfig, **over) -> clip.ClipClassificationConfig:
    kw = dict(theta=cfg.theta, lam=cfg.lam, B=cfg.B, mu=cfg.mu, epochs=cfg.cls_epochs, lr=cfg.cls_lr,
              n_cp=cfg.n_cp, use_dp=cfg.use_dp, use_cp=cfg.use_cp, dp_on_strong=cfg.dp_on_strong,
              ctx_init=cfg.ctx_init, policy=cfg.strong_policy())
    kw.update(over)
    return clip.ClipClassificationConfig(**kw)


def _vision_adapt(cfg, backbone, train, split, seed, on_epoch=None) -> tuple[PromptSet | None, list]:
    if not cfg.use_dp:
        return None, []
    if cfg.noisy_dp:
        return noisy_dp(cfg, backbone.d, seed), []
    model = PromptModel(backbone)
    rows = vision.run_adaptation(model, train, split, adaptation_config(cfg), seed, on_epoch=on_epoch)
    return model.dp, rows


def _vision_classify(cfg, backbone, dp, train, split, test, seed, on_epoch=None, **over):
    ccfg = classification_config(cfg, **over)
    model = PromptModel(backbone, dp=dp if ccfg.use_dp else None)
    rows = vision.run_classification(model, train, split, ccfg, seed, test=test, on_epoch=on_epoch,
                                     eval_every=cfg.eval_every)
    acc = vision.accuracy(model, test, ccfg.use_dp, ccfg.use_cp)
    return model, rows, acc


def run_experiment(cfg: ExperimentConfig, stage: str = "all", out_dir=None) -> dict:
    """Run one seeded FATE experiment and write metrics.csv, checkpoints and manifest.json."""
    if stage not in ("adapt", "classify", "all"):
        raise HarnessError("bad-stage", f"stage must be adapt, classify or all, got {stage!r}")
    out = Path(out_dir or cfg.out_dir)
    frozen = load_frozen(cfg)
    _, train, test = load_task(cfg)
    dp_path = out / "dp.bin"
    needs_dp = cfg.use_dp and not (cfg.variant == "vision" and cfg.noisy_dp) and not (
        cfg.variant == "vl" and cfg.n_dp == 0)
    if stage == "classify" and needs_dp and not dp_path.exists():
        raise HarnessError("missing-dp", f"{dp_path} not found; run the adapt stage first or set use_dp = false")
    out.mkdir(parents=True, exist_ok=True)
    split = make_one_shot_split(train, cfg.labels_per_class, cfg.seed)
    metrics = MetricsLog(out / "metrics.csv", cfg.log_wall_time, append=(stage == "classify"))
    manifest = dict(config=cfg.to_dict(), stage=stage, seed=cfg.seed, code_hash=code_hash(),
                    data_hash=data_hash(train, test), checkpoints={}, final={})
    frozen_hash = content_hash(frozen.state_dict())
    manifest["frozen_hash_before"] = frozen_hash

    if cfg.variant == "vision":
        _run_vision(cfg, stage, out, frozen, train, split, test, metrics, manifest, dp_path)
    else:
        _run_vl(cfg, stage, out, frozen, train, split, test, metrics, manifest, dp_path)

    manifest["frozen_hash_after"] = content_hash(frozen.state_dict())
    manifest["checkpoints"]["frozen"] = dict(path=str(Path(cfg.backbone_dir)), hash=frozen_hash)
    write_json(out / "manifest.json", manifest)
    return manifest


def _save(out: Path, name: str, state: dict, manifest: dict) -> None:
    save_tensors(out / f"{name}.bin", state)
    manifest["checkpoints"][name] = dict(path=str(out / f"{name}.bin"), hash=content_hash(state))


def _run_vision(cfg, stage, out, backbone, train, split, test, metrics, manifest, dp_path):
    dp = None
    if stage in ("adapt", "all"):
        dp, _ = _vision_adapt(cfg, backbone, train, split, cfg.seed, on_epoch=metrics)
        if dp is not None:
            _save(out, "dp", _dp_state(dp), manifest)
    if stage == "classify" and cfg.use_dp:
        dp = noisy_dp(cfg, backbone.d, cfg.seed) if cfg.noisy_dp else _load_dp(dp_path, backbone.d)
    if stage in ("classify", "all"):
        dp_before = content_hash(_dp_state(dp)) if dp is not None else None
        model, _, acc = _vision_classify(cfg, backbone, dp, train, split, test, cfg.seed, on_epoch=metrics)
        state = {}
        if model.cp is not None:
            state.update(model.cp.state_dict())
        state.update(model.head.state_dict())
        _save(out, "classifier", state, manifest)
        manifest["final"]["test_accuracy"] = acc
        if dp is not None:
            manifest["dp_hash_before_classify"] = dp_before
            manifest["dp_hash_after_classify"] = content_hash(_dp_state(dp))


def _run_vl(cfg, stage, out, dual, train, split, test, metrics, manifest, dp_path):
    model = dual.model()
    manifest["final"]["zero_shot_accuracy"] = clip.zero_shot_accuracy(model, test)
    if stage in ("adapt", "all") and cfg.use_dp:
        _, xhat = clip.run_clip_adaptation(model, train, split, clip_adaptation_config(cfg), cfg.seed,
                                           on_epoch=metrics, xhat_csv=out / "x_hat.csv")
        manifest["x_hat"] = dict(path=str(out / "x_hat.csv"), size=len(xhat), warnings=xhat.warnings)
        if model.dp is not None:
            _save(out, "dp", _dp_state(model.dp), manifest)
            manifest["final"]["dp_only_accuracy"] = clip.clip_accuracy(model, test)
    if stage == "classify" and cfg.use_dp and cfg.n_dp > 0:
        model.dp = _load_dp(dp_path, dual.visual.d)
    if stage in ("classify", "all"):
        dp_before = content_hash(_dp_state(model.dp)) if model.dp is not None else None
        clip.run_clip_classification(model, train, split, clip_classification_config(cfg), cfg.seed,
                                     test=test, on_epoch=metrics, eval_every=cfg.eval_every)
        if model.text_ctx is not None:
            _save(out, "text_ctx", model.text_ctx.state_dict(), manifest)
        manifest["final"]["test_accuracy"] = clip.clip_accuracy(model, test, use_dp=model.dp is not None)
        if model.dp is not None:
            manifest["dp_hash_before_classify"] = dp_before
            manifest["dp_hash_after_classify"] = content_hash(_dp_state(model.dp))


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------

ABLATION_CELLS = (("DP+CP", True, True), ("DP only", True, False), ("CP only", False, True), ("neither", False, False))


def run_ablation_suite(cfg: ExperimentConfig, out_dir=None) -> list[dict]:
    """{DP on/off} x {CP on/off} over ``cfg.seeds``; one shared DP and split per seed."""
    if cfg.variant != "vision":
        raise HarnessError("bad-variant", "the ablation grid runs on the vision variant")
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    backbone = load_frozen(cfg)
    _, train, test = load_task(cfg)
    accs = {label: [] for label, _, _ in ABLATION_CELLS}
    dp_hashes = []
    for seed in cfg.seeds:
        split = make_one_shot_split(train, cfg.labels_per_class, seed)
        sdir = out / f"seed{seed}"
        sdir.mkdir(exist_ok=True)
        dp, _ = _vision_adapt(cfg.replace(use_dp=True), backbone, train, split, seed,
                              on_epoch=MetricsLog(sdir / "metrics_adapt.csv", cfg.log_wall_time))
        dp_hashes.append(content_hash(_dp_state(dp)))
        for label, use_dp, use_cp in ABLATION_CELLS:
            tag = label.replace(" ", "_").replace("+", "_")
            _, _, acc = _vision_classify(cfg, backbone, dp, train, split, test, seed,
                                         on_epoch=MetricsLog(sdir / f"metrics_{tag}.csv", cfg.log_wall_time),
                                         use_dp=use_dp, use_cp=use_cp)
            accs[label].append(acc)
            log.info("ablation seed %d %s: %.4f", seed, label, acc)
    rows = []
    for label, use_dp, use_cp in ABLATION_CELLS:
        m, s = mean_std(accs[label])
        row = dict(cell=label, use_dp=use_dp, use_cp=use_cp)
        row.update({f"acc_seed{sd}": a for sd, a in zip(cfg.seeds, accs[label])})
        row.update(mean=m, std=s)
        rows.append(row)
    write_rows(out / "results.csv", rows)
    write_json(out / "manifest.json", dict(suite="ablation", config=cfg.to_dict(), code_hash=code_hash(),
                                           data_hash=data_hash(train, test), dp_hashes=dp_hashes, results=rows))
    return rows


def run_k_sweep(cfg: ExperimentConfig, ks=None, out_dir=None) -> list[dict]:
    """Zero-shot, DP-only and DP+CP test accuracy for every k (vl variant)."""
    if cfg.variant != "vl":
        raise HarnessError("bad-variant", "the k sweep needs variant = vl")
    ks = tuple(ks or cfg.ks)
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dual = load_frozen(cfg)
    _, train, test = load_task(cfg)
    per_seed = []
    zs = clip.zero_shot_accuracy(dual.model(), test)
    for seed in cfg.seeds:
        split = make_one_shot_split(train, cfg.labels_per_class, seed)
        for k in ks:
            model = dual.model()
            kdir = out / f"seed{seed}_k{k}"
            kdir.mkdir(exist_ok=True)
            metrics = MetricsLog(kdir / "metrics.csv", cfg.log_wall_time)
            _, xhat = clip.run_clip_adaptation(model, train, split, clip_adaptation_config(cfg, k=k), seed,
                                               on_epoch=metrics, xhat_csv=kdir / "x_hat.csv")
            dp_only = clip.clip_accuracy(model, test, use_dp=model.dp is not None)
            clip.run_clip_classification(model, train, split, clip_classification_config(cfg), seed,
                                         test=test, on_epoch=metrics, eval_every=cfg.eval_every)
            dp_cp = clip.clip_accuracy(model, test, use_dp=model.dp is not None)
            per_seed.append(dict(seed=seed, k=k, x_hat_size=len(xhat), x_hat_accuracy=float(
                (train.labels[xhat.indices] == xhat.labels).mean()) if len(xhat) else float("nan"),
                zero_shot=zs, dp_only=dp_only, dp_cp=dp_cp))
            log.info("k-sweep seed %d k %d: zs %.4f dp %.4f dp+cp %.4f", seed, k, zs, dp_only, dp_cp)
    rows = []
    for k in ks:
        sel = [r for r in per_seed if r["k"] == k]
        row = dict(k=k)
        for col in ("zero_shot", "dp_only", "dp_cp"):
            row[f"{col}_mean"], row[f"{col}_std"] = mean_std([r[col] for r in sel])
        rows.append(row)
    write_rows(out / "results.csv", rows)
    write_rows(out / "results_per_seed.csv", per_seed)
    write_json(out / "manifest.json", dict(suite="k-sweep", config=cfg.to_dict(), code_hash=code_hash(),
                                           data_hash=data_hash(train, test), results=rows))
    return rows


def run_dp_placement(cfg: ExperimentConfig, out_dir=None) -> list[dict]:
    """Classification with DP kept off the strong branch vs attached to it, same DP."""
    if cfg.variant != "vision":
        raise HarnessError("bad-variant", "DP placement runs on the vision variant")
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    backbone = load_frozen(cfg)
    _, train, test = load_task(cfg)
    modes = (("DP off strong branch", False), ("DP on strong branch", True))
    accs = {m: [] for m, _ in modes}
    dp_hashes = []
    for seed in cfg.seeds:
        split = make_one_shot_split(train, cfg.labels_per_class, seed)
        dp, _ = _vision_adapt(cfg.replace(use_dp=True, noisy_dp=False), backbone, train, split, seed)
        dp_hashes.append(content_hash(_dp_state(dp)))
        for label, on_strong in modes:
            _, _, acc = _vision_classify(cfg, backbone, dp, train, split, test, seed,
                                         use_dp=True, use_cp=cfg.use_cp, dp_on_strong=on_strong)
            accs[label].append(acc)
    n_cp = cfg.n_cp if cfg.use_cp else 0
    rows = []
    for label, on_strong in modes:
        m, s = mean_std(accs[label])
        rows.append(dict(mode=label, dp_on_strong=on_strong,
                         strong_tokens=backbone.sequence_length([]) + n_cp + (cfg.n_dp if on_strong else 0),
                         weak_tokens=backbone.sequence_length([]) + n_cp + cfg.n_dp,
                         **{f"acc_seed{sd}": a for sd, a in zip(cfg.seeds, accs[label])}, mean=m, std=s,
                         dp_hashes=";".join(dp_hashes)))
    direction = rows[0]["mean"] >= rows[1]["mean"]
    write_rows(out / "results.csv", rows)
    write_json(out / "manifest.json", dict(suite="dp-placement", config=cfg.to_dict(), code_hash=code_hash(),
                                           results=rows, published_direction_holds=direction))
    return rows


def run_noisy_dp_control(cfg: ExperimentConfig, out_dir=None) -> list[dict]:
    """Classifier-only fine-tuning from the labeled samples with trained, noisy, or no DP."""
    if cfg.variant != "vision":
        raise HarnessError("bad-variant", "the noisy-DP control runs on the vision variant")
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    backbone = load_frozen(cfg)
    _, train, test = load_task(cfg)
    variants = ("w. DP", "w. noisy DP", "w.o. DP")
    accs = {v: [] for v in variants}
    for seed in cfg.seeds:
        split = make_one_shot_split(train, cfg.labels_per_class, seed)
        trained, _ = _vision_adapt(cfg.replace(use_dp=True, noisy_dp=False), backbone, train, split, seed)
        prompts = {"w. DP": trained, "w. noisy DP": noisy_dp(cfg, backbone.d, seed), "w.o. DP": None}
        for label in variants:
            dp = prompts[label]
            _, _, acc = _vision_classify(cfg, backbone, dp, train, split, test, seed,
                                         use_dp=dp is not None, use_cp=False, lam=0.0)
            accs[label].append(acc)
    rows = []
    for label in variants:
        m, s = mean_std(accs[label])
        rows.append(dict(setting=f"FC {label}", **{f"acc_seed{sd}": a for sd, a in zip(cfg.seeds, accs[label])},
                         mean=m, std=s))
    write_rows(out / "results.csv", rows)
    write_json(out / "manifest.json", dict(suite="noisy-dp", config=cfg.to_dict(), code_hash=code_hash(),
                                           results=rows))
    return rows


# ---------------------------------------------------------------------------
# feature export
# ---------------------------------------------------------------------------

def load_run(run_dir):
    """Rebuild the trained model of a finished run: (config, model, test/train datasets)."""
    run_dir = Path(run_dir)
    mpath = run_dir / "manifest.json"
    if not mpath.exists():
        raise HarnessError("missing-run", f"{mpath} not found")
    manifest = json.loads(mpath.read_text())
    raw = dict(manifest["config"])
    raw["ranges"] = {k: tuple(v) for k, v in raw["ranges"].items()}
    cfg = ExperimentConfig(**raw)
    frozen = load_frozen(cfg)
    _, train, test = load_task(cfg)
    if cfg.variant == "vl":
        model = frozen.model()
    else:
        model = PromptModel(frozen)
    dp_file = run_dir / "dp.bin"
    if cfg.use_dp:
        if cfg.variant == "vision" and cfg.noisy_dp:
            model.dp = noisy_dp(cfg, frozen.d if isinstance(frozen, VisionBackbone) else frozen.visual.d, cfg.seed)
        elif dp_file.exists():
            d = frozen.d if isinstance(frozen, VisionBackbone) else frozen.visual.d
            model.dp = _load_dp(dp_file, d)
    if cfg.variant == "vision":
        cls_file = run_dir / "classifier.bin"
        if not cls_file.exists():
            raise HarnessError("missing-checkpoint", f"{cls_file} not found; the classify stage has not run")
        state = load_tensors(cls_file)
        if "cp.tokens" in state:
            tokens = state["cp.tokens"]
            model.cp = PromptSet(tokens.shape[0], frozen.d, "CP", init=tokens, trainable=False, dtype=tokens.dtype)
        head = vision.ClassifierHead(frozen.d, train.num_classes)
        head.load_state_dict({k: v for k, v in state.items() if k.startswith("head")})
        model.head = head
    else:
        ctx_file = run_dir / "text_ctx.bin"
        if ctx_file.exists():
            tokens = load_tensors(ctx_file)["text_ctx.tokens"]
            model.text_ctx = ContextPrompt(tokens.shape[0], tokens.shape[1], init=tokens, trainable=False,
                                           dtype=tokens.dtype)
    return cfg, model, train, test


def export_features(run_dir, split: str = "test", out_path=None) -> Path:
    """Write (sample_index, label, f0..f{d-1}) for the run's classification feature."""
    if split not in ("train", "test"):
        raise HarnessError("bad-split", f"split must be train or test, got {split!r}")
    cfg, model, train, test = load_run(run_dir)
    ds = train if split == "train" else test
    if cfg.variant == "vision":
        feats = vision.features(model, ds.images, use_dp=model.dp is not None, use_cp=model.cp is not None)
    else:
        feats = clip.image_features_np(model, ds.images, model.dp)
    out_path = Path(out_path or Path(run_dir) / f"features_{split}.csv")
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_index", "label"] + [f"f{i}" for i in range(feats.shape[1])])
        for i, (lab, row) in enumerate(zip(ds.labels, feats)):
            w.writerow([i, int(lab)] + [repr(float(x)) for x in row])
    return out_path
