"""Adam, the two-stage training schedule, evaluation, checkpoints and ablations."""
from __future__ import annotations

import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import container
from .datagen import AugmentConfig, ParsingSample, augment
from .losses import LossConfig, segmentation_loss
from .metrics import ConfusionMatrix
from .model import ModelConfig, MSDBModel
from .tensor import Graph, ShapeError, Tensor

log = logging.getLogger(__name__)

__all__ = [
    "Adam",
    "AdamState",
    "ScheduleError",
    "Schedule",
    "ablation_suite",
    "adam_step",
    "evaluate_model",
    "format_ablation",
    "load_checkpoint",
    "save_checkpoint",
    "train_stage",
]

STAGES = {1: 1, 2: 2, "mask": 1, "parse": 2}


class ScheduleError(RuntimeError):
    """Raised when the two-stage order is violated."""


# -- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None],
              state: AdamState) -> AdamState:
    """Bias-corrected Adam update in place; clears ``.grad`` on every parameter.

    A missing gradient counts as zero so moment decay stays in lockstep.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ShapeError(f"{name}: grad {g.shape} vs param {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
        p.grad = None
    return state


class Adam:
    def __init__(self, named_params: Sequence[tuple[str, Tensor]], lr: float = 1e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(named_params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self) -> None:
        adam_step(self.params, {k: p.grad for k, p in self.params.items()}, self.state)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# -- schedule and training -------------------------------------------------

@dataclass(frozen=True)
class Schedule:
    stage1_epochs: int = 20
    stage2_epochs: int = 50
    batch_size: int = 8
    seed: int = 0
    lr: float = 1e-3
    stage1_loss: str = "ce"
    stage2_loss: str = "mcb-fl"
    freeze_backbone: bool = False
    freeze_mask: bool = True
    # Keep the seg loss on the shared backbone in stage 2 so a frozen mask head
    # still reads features it was trained on.
    mask_anchor: bool = True
    augment: bool = True


def iterate_batches(samples: Sequence[ParsingSample], batch_size: int, seed: int,
                    stage: int, epoch: int, aug: AugmentConfig | None
                    ) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Shuffled minibatches; every random draw is keyed on (seed, stage, epoch, index)."""
    order = np.random.default_rng([seed, stage, epoch]).permutation(len(samples))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        batch = []
        for i in idx:
            s = samples[i]
            if aug is not None:
                s = augment(s, np.random.default_rng([seed, stage, epoch, int(i)]), aug)
            batch.append(s)
        yield (np.stack([s.image for s in batch]),
               np.stack([s.parse_label for s in batch]),
               np.stack([s.seg_label for s in batch]))


def trainable_parameters(model: MSDBModel, stage: int, schedule: Schedule) -> list[tuple[str, Tensor]]:
    named = model.named_parameters()
    if stage == 1:
        return [(k, v) for k, v in named if k.startswith(("backbone.", "mask."))]
    keep = []
    for k, v in named:
        if k.startswith("backbone.") and schedule.freeze_backbone:
            continue
        if k.startswith("mask.") and schedule.freeze_mask:
            continue
        keep.append((k, v))
    return keep


def _stage_loss(model, stage, schedule, loss_cfg, images, parse, seg) -> Tensor:
    seg_logits, parse_logits = model.forward(Tensor(images))
    if stage == 1:
        return segmentation_loss(seg_logits, seg, schedule.stage1_loss, loss_cfg)
    loss = segmentation_loss(parse_logits, parse, schedule.stage2_loss, loss_cfg)
    if seg_logits is not None and (schedule.mask_anchor or not schedule.freeze_mask):
        loss = loss + segmentation_loss(seg_logits, seg, schedule.stage1_loss, loss_cfg)
    return loss


def _mask_loss(model: MSDBModel, schedule, loss_cfg, images, seg) -> Tensor:
    stages = model.backbone_forward(Tensor(images))
    seg_logits = model.mask_branch_forward(stages[3])
    return segmentation_loss(seg_logits, seg, schedule.stage1_loss, loss_cfg)


def train_stage(
    stage,
    samples: Sequence[ParsingSample],
    model: MSDBModel,
    schedule: Schedule,
    loss_cfg: LossConfig = LossConfig(),
    *,
    eval_samples: Sequence[ParsingSample] | None = None,
    optimizer: Adam | None = None,
    start_epoch: int = 0,
    epochs: int | None = None,
    from_scratch: bool = False,
    aug: AugmentConfig | None = AugmentConfig(),
    log_path: str | Path | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[list[dict], Adam]:
    """Run one training stage; returns per-epoch records and the optimizer.

    Stage 1 fits the mask branch on segmentation labels. Stage 2 fits the
    parsing branch with ``schedule.stage2_loss`` and refuses to run before
    stage 1 unless ``from_scratch`` is set or the model has no mask branch.
    """
    stage = STAGES[stage]
    cfg = model.config
    if stage == 1 and not cfg.mask_branch:
        raise ScheduleError("stage 1 trains the mask branch, which this model lacks")
    if stage == 2 and cfg.mask_branch and 1 not in model.completed_stages and not from_scratch:
        raise ScheduleError("stage 2 needs a stage-1 checkpoint (or from_scratch=True)")
    if not samples:
        raise ValueError("no training samples")
    if optimizer is None:
        optimizer = Adam(trainable_parameters(model, stage, schedule), lr=schedule.lr)
    if epochs is None:
        epochs = schedule.stage1_epochs if stage == 1 else schedule.stage2_epochs
    aug = aug if schedule.augment else None
    records = []
    for epoch in range(start_epoch, start_epoch + epochs):
        t0 = time.perf_counter()
        losses = []
        for images, parse, seg in iterate_batches(samples, schedule.batch_size,
                                                   schedule.seed, stage, epoch, aug):
            with Graph() as graph:
                if stage == 1:
                    loss = _mask_loss(model, schedule, loss_cfg, images, seg)
                else:
                    loss = _stage_loss(model, stage, schedule, loss_cfg, images, parse, seg)
                graph.backward(loss)
            optimizer.step()
            losses.append(loss.item())
        record = {"stage": stage, "epoch": epoch + 1, "loss": float(np.mean(losses)),
                  "mean_iou": None, "mean_accuracy": None}
        if eval_samples:
            rep = evaluate_model(model, eval_samples, target="seg" if stage == 1 else "parse")
            record["mean_iou"], record["mean_accuracy"] = rep["mean_iou"], rep["mean_accuracy"]
        record["wall_time"] = time.perf_counter() - t0
        records.append(record)
        log.info("stage %d epoch %d loss %.5f", stage, epoch + 1, record["loss"])
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")
        if on_epoch is not None:
            on_epoch(record)
    model.completed_stages.add(stage)
    return records, optimizer


def evaluate_model(model: MSDBModel, samples: Sequence[ParsingSample],
                   batch_size: int = 16, target: str = "parse") -> dict:
    """Accumulate one confusion matrix over ``samples`` and report its metrics."""
    if not samples:
        raise ValueError("evaluate_model needs a non-empty dataset")
    cfg = model.config
    C = cfg.num_parse_classes if target == "parse" else cfg.num_seg_classes
    cm = ConfusionMatrix(C)
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images = Tensor(np.stack([s.image for s in chunk]))
        seg_pred, parse_pred = model.predict(images)
        for s, sp, pp in zip(chunk, seg_pred if seg_pred is not None else [None] * len(chunk),
                             parse_pred):
            if target == "parse":
                cm.update(s.parse_label, pp)
            else:
                cm.update(s.seg_label, sp)
    return cm.report()


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(path: str | Path, model: MSDBModel, optimizer: Adam | None = None,
                    meta: dict | None = None) -> None:
    """Manifest (u8 JSON) followed by parameter payloads, then Adam moments."""
    names = list(model.params)
    manifest = {
        "format": "msdb-checkpoint",
        "config": model.config.to_dict(),
        "params": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
        "completed_stages": sorted(model.completed_stages),
        "optimizer": None,
        "meta": meta or {},
    }
    opt_names = []
    if optimizer is not None:
        st = optimizer.state
        opt_names = [n for n in optimizer.params if n in st.m]
        manifest["optimizer"] = {
            "lr": st.lr, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps,
            "step": st.step, "params": list(optimizer.params), "moments": opt_names,
        }
    buf = io.BytesIO()
    container.write_array(buf, np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), np.uint8))
    for n in names:
        container.write_array(buf, model.params[n].data)
    for n in opt_names:
        container.write_array(buf, optimizer.state.m[n])
        container.write_array(buf, optimizer.state.v[n])
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[MSDBModel, Adam | None, dict]:
    with open(path, "rb") as fh:
        arrays = list(container.iter_arrays(fh))
    if not arrays:
        raise container.ContainerError(f"{path}: empty checkpoint")
    manifest = json.loads(arrays[0].tobytes().decode())
    if manifest.get("format") != "msdb-checkpoint":
        raise container.ContainerError(f"{path}: not a checkpoint")
    model = MSDBModel(ModelConfig.from_dict(manifest["config"]))
    entries = manifest["params"]
    payload = arrays[1:1 + len(entries)]
    if len(payload) != len(entries):
        raise container.ContainerError(f"{path}: truncated parameter payload")
    model.load_state({e["name"]: a for e, a in zip(entries, payload)})
    model.completed_stages = set(manifest["completed_stages"])
    optimizer = None
    opt = manifest["optimizer"]
    if opt is not None:
        optimizer = Adam([(n, model.params[n]) for n in opt["params"]], lr=opt["lr"],
                         betas=(opt["beta1"], opt["beta2"]), eps=opt["eps"])
        optimizer.state.step = opt["step"]
        rest = arrays[1 + len(entries):]
        if len(rest) != 2 * len(opt["moments"]):
            raise container.ContainerError(f"{path}: truncated optimizer payload")
        for i, n in enumerate(opt["moments"]):
            optimizer.state.m[n] = rest[2 * i].copy()
            optimizer.state.v[n] = rest[2 * i + 1].copy()
    return model, optimizer, manifest["meta"]


# -- ablations -------------------------------------------------------------

ABLATIONS: dict[str, list[tuple[str, dict, dict]]] = {
    # arm name, model-config overrides, loss overrides
    "dual-branch": [
        ("Baseline", {"parsing_branch": False, "mask_branch": False}, {}),
        ("+PB", {"mask_branch": False}, {}),
        ("+PB+MB", {}, {}),
    ],
    "db-block": [
        ("MSDB-FCN+B", {"upsample": "b"}, {}),
        ("MSDB-FCN+D", {"upsample": "d"}, {}),
        ("MSDB-FCN+DB", {"upsample": "db"}, {}),
    ],
    "loss": [
        ("CE", {"parsing_branch": False, "mask_branch": False}, {"kind": "ce"}),
        ("FL", {"parsing_branch": False, "mask_branch": False}, {"kind": "fl", "alpha_t": 1.0}),
        ("MCB-FL", {"parsing_branch": False, "mask_branch": False}, {"kind": "mcb-fl"}),
    ],
    "alpha": [
        (f"alpha={a}", {"parsing_branch": False, "mask_branch": False},
         {"kind": "mcb-fl", "alpha": float(a)})
        for a in (1, 2, 3, 6)
    ],
}


def train_model(model_cfg: ModelConfig, train: Sequence[ParsingSample], schedule: Schedule,
                loss_cfg: LossConfig, aug: AugmentConfig | None = AugmentConfig()) -> MSDBModel:
    """Both stages from a fresh initialisation (stage 1 only with a mask branch)."""
    model = MSDBModel(model_cfg)
    if model_cfg.mask_branch:
        train_stage(1, train, model, schedule, loss_cfg, aug=aug)
    train_stage(2, train, model, schedule, loss_cfg, aug=aug)
    return model


def ablation_suite(suite: str, train: Sequence[ParsingSample], test: Sequence[ParsingSample],
                   model_cfg: ModelConfig, schedule: Schedule,
                   loss_cfg: LossConfig = LossConfig(),
                   aug: AugmentConfig | None = AugmentConfig(),
                   arms: Sequence[str] | None = None) -> list[dict]:
    """Train and evaluate every arm of ``suite`` under one seed and dataset."""
    if suite not in ABLATIONS:
        raise ValueError(f"unknown suite {suite!r}; choose from {sorted(ABLATIONS)}")
    rows = []
    for name, model_over, loss_over in ABLATIONS[suite]:
        if arms is not None and name not in arms:
            continue
        loss_over = dict(loss_over)
        kind = loss_over.pop("kind", schedule.stage2_loss)
        arm_sched = replace(schedule, stage2_loss=kind)
        arm_loss = replace(loss_cfg, **loss_over)
        t0 = time.perf_counter()
        model = train_model(replace(model_cfg, **model_over), train, arm_sched, arm_loss, aug)
        rep = evaluate_model(model, test)
        rows.append({"arm": name, "mean_iou": rep["mean_iou"],
                     "mean_accuracy": rep["mean_accuracy"],
                     "seconds": time.perf_counter() - t0})
        log.info("%s arm %s: mIoU %.4f mAcc %.4f", suite, name, rep["mean_iou"], rep["mean_accuracy"])
    return rows


def format_ablation(rows: Sequence[dict], suite: str) -> str:
    lines = [
        f"# ablation: {suite} (toy synthetic scale; only the ordering of arms is meaningful)",
        f"{'Method':<16} & {'Mean IoU(%)':>11} & {'Mean Acc.(%)':>12} \\\\",
    ]
    for r in rows:
        lines.append(f"{r['arm']:<16} & {100 * r['mean_iou']:>11.2f} & {100 * r['mean_accuracy']:>12.2f} \\\\")
    return "\n".join(lines)
