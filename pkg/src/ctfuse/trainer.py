"""Staged training orchestration for both branches.

Stage plans carry the published schedule constants; the desk profile scales
epoch counts down while keeping learning rates, loss compositions, and
schedule shapes unchanged.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from . import objectives as obj
from .backbones import MultiView25D, ResNet3D, save_checkpoint, set_trainable_stage
from .ensemble_eval import LogitTable, macro_f1
from .multiview import ViewSet


@dataclass
class StagePlan:
    name: str
    epochs: int
    base_lr: float
    schedule: str = "cosine"  # or "constant"
    warmup_frac: float = 0.05
    weight_decay: float = 0.0
    losses: str = "ce"  # "vrex" | "ce_supcon_mixup" | "ce"
    trainability_stage: int = 3

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if not (0.0 <= self.warmup_frac < 0.5):
            raise ValueError("warmup_frac must be in [0, 0.5)")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass
class AugCfg:
    rot_deg: float = 15.0
    hflip_p: float = 0.5
    scale_range: tuple[float, float] = (0.8, 1.2)
    brightness: float = 0.1  # additive jitter, fraction of full range
    contrast: float = 0.1  # multiplicative jitter half-width
    noise_sigma: float = 0.01  # on [0, 1]-scaled intensities
    cutout_frac: float = 0.10  # masked fraction of slice area

    def __post_init__(self):
        lo, hi = self.scale_range
        vals = (self.rot_deg, self.hflip_p, lo, hi, self.brightness,
                self.contrast, self.noise_sigma, self.cutout_frac)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("augmentation parameters must be finite")
        if lo > hi or lo <= 0:
            raise ValueError("invalid scale_range")
        if not (0.0 <= self.hflip_p <= 1.0):
            raise ValueError("hflip_p must be a probability")

    @classmethod
    def disabled(cls) -> "AugCfg":
        return cls(rot_deg=0.0, hflip_p=0.0, scale_range=(1.0, 1.0), brightness=0.0,
                   contrast=0.0, noise_sigma=0.0, cutout_frac=0.0)

    @property
    def is_identity(self) -> bool:
        return (self.rot_deg == 0 and self.hflip_p == 0 and
                self.scale_range == (1.0, 1.0) and self.brightness == 0 and
                self.contrast == 0 and self.noise_sigma == 0 and
                self.cutout_frac == 0)


@dataclass
class TrainState:
    epoch: int = 0
    global_step: int = 0
    rng_seed: int = 0
    best_val_metric: float = -1.0
    best_checkpoint: str | None = None
    loss_history: list[float] = field(default_factory=list)
    val_history: list[float] = field(default_factory=list)


def _scaled_epochs(epochs: int, factor: float) -> int:
    return max(1, int(round(epochs * factor)))


def plan_3d(desk_factor: float = 1.0) -> list[StagePlan]:
    """Two-stage 3D schedule: VREx pretraining, then CE+SupCon+MixUp fine-tuning."""
    return [
        StagePlan(name="vrex_pretrain", epochs=_scaled_epochs(5, desk_factor),
                  base_lr=1e-4, schedule="cosine", warmup_frac=0.05,
                  weight_decay=0.0, losses="vrex", trainability_stage=3),
        StagePlan(name="finetune", epochs=_scaled_epochs(20, desk_factor),
                  base_lr=1e-5, schedule="cosine", warmup_frac=0.05,
                  weight_decay=1e-5, losses="ce_supcon_mixup", trainability_stage=3),
    ]


def plan_25d(desk_factor: float = 1.0) -> list[StagePlan]:
    """Three-stage 2.5D schedule with progressive unfreezing."""
    return [
        StagePlan(name="head_only", epochs=_scaled_epochs(10, desk_factor),
                  base_lr=1e-3, schedule="cosine", warmup_frac=0.05,
                  weight_decay=0.0, losses="ce", trainability_stage=1),
        StagePlan(name="partial_unfreeze", epochs=_scaled_epochs(15, desk_factor),
                  base_lr=1e-4, schedule="cosine", warmup_frac=0.05,
                  weight_decay=0.0, losses="ce", trainability_stage=2),
        StagePlan(name="full_finetune", epochs=_scaled_epochs(20, desk_factor),
                  base_lr=5e-5, schedule="cosine", warmup_frac=0.05,
                  weight_decay=0.0, losses="ce", trainability_stage=3),
    ]


def lr_at(step: int, total_steps: int, base_lr: float, warmup_frac: float) -> float:
    """Linear warmup to base_lr, then cosine decay to 0."""
    if total_steps <= 0:
        raise ValueError("total_steps must be > 0")
    if not (0 <= step <= total_steps):
        raise ValueError("step out of range")
    warmup_steps = warmup_frac * total_steps
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# --- augmentation ------------------------------------------------------------


def _affine_slice(img: np.ndarray, angle_deg: float, scale: float) -> np.ndarray:
    """Rotate + scale one 2D slice about its center, bilinear, edge clamped."""
    if angle_deg == 0.0 and scale == 1.0:
        return img
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(angle_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    # inverse map: output pixel -> source coordinate
    dy, dx = (yy - cy) / scale, (xx - cx) / scale
    sy = cy + cos_t * dy + sin_t * dx
    sx = cx - sin_t * dy + cos_t * dx
    sy = np.clip(sy, 0, h - 1)
    sx = np.clip(sx, 0, w - 1)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy, wx = sy - y0, sx - x0
    top = img[y0, x0] * (1 - wx) + img[y0, x1] * wx
    bot = img[y1, x0] * (1 - wx) + img[y1, x1] * wx
    return top * (1 - wy) + bot * wy


def _draw_params(cfg: AugCfg, rng: np.random.Generator) -> dict:
    return {
        "angle": float(rng.uniform(-cfg.rot_deg, cfg.rot_deg)) if cfg.rot_deg > 0 else 0.0,
        "scale": float(rng.uniform(*cfg.scale_range)),
        "flip": bool(rng.random() < cfg.hflip_p),
        "brightness": float(rng.uniform(-cfg.brightness, cfg.brightness)) * 255.0
        if cfg.brightness > 0 else 0.0,
        "contrast": 1.0 + (float(rng.uniform(-cfg.contrast, cfg.contrast))
                           if cfg.contrast > 0 else 0.0),
        "cutout": cfg.cutout_frac > 0,
    }


def _apply_slice_params(sl: np.ndarray, p: dict) -> np.ndarray:
    out = _affine_slice(sl, p["angle"], p["scale"])
    if p["flip"]:
        out = out[:, ::-1]
    if p["contrast"] != 1.0 or p["brightness"] != 0.0:
        out = out * p["contrast"] + p["brightness"]
    return out


def _cutout_box(shape: tuple[int, int], frac: float, rng: np.random.Generator):
    h, w = shape
    side = max(1, int(round(math.sqrt(frac) * min(h, w))))
    r = int(rng.integers(0, h - side + 1))
    c = int(rng.integers(0, w - side + 1))
    return r, c, side


def augment(sample, cfg: AugCfg, rng: np.random.Generator):
    """Augment a volume (3D array, axial-plane spatial ops) or a view array.

    View arrays are (3, K, S, S): one parameter draw per view, shared by all K
    slices of that view, including the noise field and cutout box.
    """
    arr = np.asarray(sample, dtype=np.float64)
    if arr.ndim == 3:  # volume: one draw for the whole volume
        p = _draw_params(cfg, rng)
        out = np.stack([_apply_slice_params(arr[d], p) for d in range(arr.shape[0])])
        if cfg.noise_sigma > 0:
            out = out + rng.normal(0.0, cfg.noise_sigma * 255.0, size=out.shape)
        if p["cutout"]:
            r, c, side = _cutout_box(out.shape[1:], cfg.cutout_frac, rng)
            out[:, r:r + side, c:c + side] = 0.0
        return np.clip(out, 0.0, 255.0)
    if arr.ndim == 4:  # (views, K, S, S)
        out = np.empty_like(arr)
        for v in range(arr.shape[0]):
            p = _draw_params(cfg, rng)
            noise = (rng.normal(0.0, cfg.noise_sigma * 255.0, size=arr.shape[2:])
                     if cfg.noise_sigma > 0 else None)
            box = _cutout_box(arr.shape[2:], cfg.cutout_frac, rng) if p["cutout"] else None
            for k in range(arr.shape[1]):
                sl = _apply_slice_params(arr[v, k], p)
                if noise is not None:
                    sl = sl + noise
                if box is not None:
                    r, c, side = box
                    sl = sl.copy()
                    sl[r:r + side, c:c + side] = 0.0
                out[v, k] = sl
        return np.clip(out, 0.0, 255.0)
    raise ValueError(f"unsupported sample rank {arr.ndim}")


def augment_viewset(vs: ViewSet, cfg: AugCfg, rng: np.random.Generator) -> ViewSet:
    arr = vs.as_array()[..., 0]  # channels are identical
    aug = augment(arr, cfg, rng)
    rep = np.repeat(aug[..., None], 3, axis=-1)
    return ViewSet(axial=rep[0], coronal=rep[1], sagittal=rep[2],
                   source_indices=dict(vs.source_indices))


# --- data container and loop -------------------------------------------------


@dataclass
class BranchData:
    """In-memory training arrays for one branch (values in [0, 255])."""

    inputs: np.ndarray  # 3D: (N, S, S, S); 2.5D: (N, 3, K, S, S)
    labels: np.ndarray
    domains: np.ndarray
    ids: list[str]
    val_inputs: np.ndarray
    val_labels: np.ndarray
    val_domains: np.ndarray
    val_ids: list[str]
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.labels) == 0:
            raise ValueError("empty training set")


class NonFiniteLossError(RuntimeError):
    pass


def _to_model_input(batch: np.ndarray, branch: str) -> torch.Tensor:
    x = torch.from_numpy(np.ascontiguousarray(batch, dtype=np.float32)) / 255.0
    if branch == "3d":
        return x[:, None]  # (B, 1, S, S, S)
    # 2.5D: standardize and replicate channels -> (B, 3, K, 3, S, S)
    x = (x - 0.5) / 0.5
    return x[:, :, :, None].repeat(1, 1, 1, 3, 1, 1)


def _stratified_batches(domains: np.ndarray, batch_size: int, rng: np.random.Generator):
    """Round-robin over per-domain queues so each batch spans >= 2 domains."""
    queues = {}
    for d in sorted(set(domains.tolist())):
        idx = np.flatnonzero(domains == d)
        rng.shuffle(idx)
        queues[d] = list(idx)
    order = sorted(queues)
    batches, batch = [], []
    while any(queues[d] for d in order):
        for d in order:
            if queues[d]:
                batch.append(queues[d].pop())
                if len(batch) == batch_size:
                    batches.append(batch)
                    batch = []
    if batch:
        batches.append(batch)
    # fold single-domain tail batches into a neighbor so every step spans >= 2
    # domains whenever the dataset does
    if len(queues) >= 2:
        merged = []
        for b in batches:
            if merged and len({int(domains[i]) for i in b}) < 2:
                merged[-1].extend(b)
            else:
                merged.append(b)
        batches = merged
    return batches


def _plain_batches(n: int, batch_size: int, rng: np.random.Generator):
    idx = rng.permutation(n)
    return [idx[i:i + batch_size].tolist() for i in range(0, n, batch_size)]


@torch.no_grad()
def predict_logits(model, inputs: np.ndarray, ids: list[str], class_names: list[str],
                   branch: str, batch_size: int = 8, model_tag: str = "") -> LogitTable:
    model.eval()
    entries = {}
    for i in range(0, len(ids), batch_size):
        x = _to_model_input(inputs[i:i + batch_size], branch)
        out = model(x)
        for j, sid in enumerate(ids[i:i + batch_size]):
            entries[sid] = out.logits[j].double().numpy()
    return LogitTable(entries=entries, class_names=list(class_names), model_tag=model_tag)


def _evaluate(model, data: BranchData, branch: str, batch_size: int) -> float:
    table = predict_logits(model, data.val_inputs, data.val_ids,
                           data.class_names or [str(c) for c in
                                                range(int(data.labels.max()) + 1)],
                           branch, batch_size)
    preds = [int(np.argmax(table.entries[sid])) for sid in data.val_ids]
    n_classes = len(table.class_names)
    return macro_f1(preds, data.val_labels, n_classes)


def train_branch(
    model,
    data: BranchData,
    plans: list[StagePlan],
    seed: int,
    out_dir: Path | str,
    batch_size: int = 8,
    aug_cfg: AugCfg | None = None,
    vrex_cfg: obj.VRExCfg | None = None,
    supcon_cfg: obj.SupConCfg | None = None,
    mixup_cfg: obj.MixUpCfg | None = None,
    model_cfg=None,
    resume: bool = False,
) -> TrainState:
    """Run the staged schedule; logs JSONL; keeps the best-val-F1 checkpoint."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    branch = "3d" if isinstance(model, ResNet3D) else "25d"
    vrex_cfg = vrex_cfg or obj.VRExCfg()
    supcon_cfg = supcon_cfg or obj.SupConCfg()
    mixup_cfg = mixup_cfg or obj.MixUpCfg()
    aug_cfg = aug_cfg or AugCfg.disabled()
    n_classes = len(data.class_names) if data.class_names else int(data.labels.max()) + 1

    torch.manual_seed(seed)
    state = TrainState(rng_seed=seed)
    start_stage, start_epoch = 0, 0
    resume_path = out_dir / "resume.pt"
    if resume and resume_path.exists():
        blob = torch.load(resume_path, weights_only=False)
        model.load_state_dict(blob["model"])
        state = blob["state"]
        start_stage, start_epoch = blob["stage_idx"], blob["epoch_in_stage"]

    log_path = out_dir / "train_log.jsonl"
    log_fh = open(log_path, "a" if resume else "w")

    def log(rec: dict):
        log_fh.write(json.dumps(rec) + "\n")
        log_fh.flush()

    best_path = out_dir / "best.ckpt"
    multi_domain = len(set(data.domains.tolist())) >= 2

    for stage_idx, plan in enumerate(plans):
        if stage_idx < start_stage:
            continue
        set_trainable_stage(model, plan.trainability_stage)
        params = [p for p in model.parameters() if p.requires_grad]
        optimizer = torch.optim.AdamW(params, lr=plan.base_lr,
                                      weight_decay=plan.weight_decay)
        rng = np.random.Generator(np.random.PCG64(seed * 100003 + stage_idx))
        n = len(data.labels)
        steps_per_epoch = math.ceil(n / batch_size)
        total_steps = plan.epochs * steps_per_epoch
        step_in_stage = 0
        first_epoch = start_epoch if stage_idx == start_stage else 0
        # burn the rng streams of completed epochs so resume stays aligned
        for _ in range(first_epoch):
            if plan.losses == "vrex" and multi_domain:
                _stratified_batches(data.domains, batch_size, rng)
            else:
                _plain_batches(n, batch_size, rng)
            step_in_stage += steps_per_epoch

        for epoch in range(first_epoch, plan.epochs):
            model.train()
            if plan.losses == "vrex" and multi_domain:
                batches = _stratified_batches(data.domains, batch_size, rng)
            else:
                batches = _plain_batches(n, batch_size, rng)
            for batch_idx in batches:
                lr = (lr_at(step_in_stage, total_steps, plan.base_lr, plan.warmup_frac)
                      if plan.schedule == "cosine" else plan.base_lr)
                for g in optimizer.param_groups:
                    g["lr"] = lr
                raw = data.inputs[batch_idx].astype(np.float64)
                if not aug_cfg.is_identity:
                    raw = np.stack([augment(s, aug_cfg, rng) for s in raw])
                x = _to_model_input(raw, branch)
                labels = torch.from_numpy(data.labels[batch_idx]).long()
                dom = data.domains[batch_idx]
                components: dict[str, float] = {}

                if plan.losses == "vrex":
                    out = model(x)
                    per_domain = []
                    for d in sorted(set(dom.tolist())):
                        mask = torch.from_numpy(dom == d)
                        per_domain.append(obj.cross_entropy(out.logits[mask], labels[mask]))
                    loss = obj.vrex_loss(per_domain, vrex_cfg.lambda_vrex)
                    components["mean_ce"] = float(torch.stack(per_domain).mean().detach())
                elif plan.losses == "ce_supcon_mixup":
                    out = model(x)
                    contrast = model.contrast_embedding(out.embedding)
                    mixup_state = None
                    logits = out.logits
                    if mixup_cfg.enabled and x.shape[0] >= 2:
                        mixed, la, lb, lam = obj.mixup(x, labels, mixup_cfg.alpha, rng)
                        logits = model(mixed).logits
                        mixup_state = obj.MixupState(la, lb, lam)
                        components["lam"] = lam
                    loss = obj.stage2_total_loss(logits, contrast, labels,
                                                 supcon_cfg, mixup_state)
                else:
                    out = model(x)
                    loss = obj.cross_entropy(out.logits, labels)

                if not torch.isfinite(loss):
                    log_fh.close()
                    raise NonFiniteLossError(
                        f"non-finite loss at stage={plan.name} step={state.global_step}: "
                        f"components={components}"
                    )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                loss_val = float(loss.detach())
                state.loss_history.append(loss_val)
                log({"step": state.global_step, "stage": plan.name, "epoch": epoch,
                     "lr": lr, "loss": loss_val, "components": components,
                     "domains": sorted(set(int(d) for d in dom))})
                state.global_step += 1
                step_in_stage += 1

            val_f1 = _evaluate(model, data, branch, batch_size)
            state.val_history.append(val_f1)
            state.epoch += 1
            log({"stage": plan.name, "epoch": epoch, "val_macro_f1": val_f1})
            if val_f1 > state.best_val_metric:
                state.best_val_metric = val_f1
                save_checkpoint(model, model_cfg, best_path,
                                meta={"stage": plan.name, "epoch": epoch,
                                      "val_macro_f1": val_f1})
                state.best_checkpoint = str(best_path)
            torch.save({"model": model.state_dict(), "state": state,
                        "stage_idx": stage_idx, "epoch_in_stage": epoch + 1},
                       resume_path)
    log_fh.close()
    return state
