"""Two-stage training, evaluation, ablation and inference."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, load_into, save_checkpoint
from .config import TrainConfig, train_config_from_dict
from .data import Dataset, Sample, load_dataset, stack_samples
from .decoder import predict_mask
from .fusion import AblationFlags, ConfigError
from .io import load_tensor, save_pgm, save_tensor
from .losses import ConfusionCounts, classification_accuracy, cross_entropy, dice_loss
from .model import CoarseBranch, SKSModel
from .nn import Module
from .tensor import Tensor

log = logging.getLogger(__name__)

# Reference DSC on LITS with 35 annotated scans; reported alongside, never asserted.
REPORTED_DSC = {
    "w/o coarse-grain branch": 0.420,
    "w/o prompt skip": 0.505,
    "w/o RCS": 0.467,
    "SKS (full)": 0.549,
}

ABLATION_VARIANTS = [
    ("w/o coarse-grain branch", AblationFlags(no_coarse_branch=True)),
    ("w/o prompt skip", AblationFlags(no_prompt_skip=True)),
    ("w/o RCS", AblationFlags(no_rcs=True)),
    ("SKS (full)", AblationFlags()),
]

CSV_FIELDS = ["method", "dsc", "jc", "precision", "recall"]


class TrainingDiverged(RuntimeError):
    pass


class SGD:
    """Momentum SGD: v <- momentum * v + grad; p <- p - lr * v."""

    def __init__(self, params: list[T.Parameter], lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr, self.momentum = float(lr), float(momentum)
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data = p.data - self.lr * v


class BatchSampler:
    """Seeded epoch permutations (Philox stream); full-batch when batch >= n."""

    def __init__(self, n: int, batch: int, seed: int, stream: int):
        self.n, self.batch = n, batch
        self.rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))
        self.buffer: list[int] = []

    def next(self) -> np.ndarray:
        if self.batch >= self.n:
            return np.arange(self.n)
        while len(self.buffer) < self.batch:
            self.buffer.extend(int(i) for i in self.rng.permutation(self.n))
        out, self.buffer = self.buffer[: self.batch], self.buffer[self.batch:]
        return np.array(out)


@dataclass
class TrainResult:
    model: Module
    history: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None
    seconds: float = 0.0

    def losses(self) -> list[float]:
        return [r["loss"] for r in self.history if "loss" in r]


def _check_finite(loss: Tensor, step: int) -> None:
    if not math.isfinite(loss.item()):
        raise TrainingDiverged(f"loss became {loss.item()} at step {step}; lower the learning rate")


def _write_log(path, history: list[dict]) -> None:
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in history))


def _split(dataset: Dataset, name: str) -> list[Sample]:
    samples = dataset.split(name)
    if not samples:
        raise ValueError(f"split {name!r} of {dataset.root} is empty")
    return samples


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield np.arange(start, min(n, start + size))


# --- stage 1 ------------------------------------------------------------------


def coarse_predictions(model: CoarseBranch, images: np.ndarray, batch: int = 16) -> np.ndarray:
    preds = []
    with T.no_tape():
        for idx in _batches(len(images), batch):
            _, logits = model(Tensor(images[idx], dtype=_model_dtype(model)))
            preds.append(np.argmax(logits.data, axis=-1))
    return np.concatenate(preds)


def train_coarse(cfg: TrainConfig, dataset: Dataset | None = None) -> TrainResult:
    """Stage 1: fit the coarse encoder + classifier head with cross-entropy on image-level labels."""
    cfg.validate()
    if cfg.stage != "coarse":
        raise ConfigError(f"train_coarse needs stage 'coarse', config says {cfg.stage!r}")
    if cfg.ablation.no_coarse_branch:
        raise ConfigError("the coarse branch is ablated; there is nothing to pretrain")
    dataset = dataset if dataset is not None else load_dataset(cfg.dataset)
    images, _, labels = stack_samples(_split(dataset, cfg.train_split))
    t0 = time.perf_counter()
    with T.precision(cfg.precision):
        dtype = T.get_default_dtype()
        model = CoarseBranch(cfg.model, seed=cfg.seed)
        images = images.astype(dtype)
        opt = SGD(model.parameters(), cfg.optim.lr, cfg.optim.momentum)
        sampler = BatchSampler(len(images), cfg.optim.batch, cfg.seed, stream=1)
        history = [{"step": 0, "train_accuracy": classification_accuracy(coarse_predictions(model, images), labels)}]
        for step in range(1, cfg.optim.steps + 1):
            idx = sampler.next()
            with T.Tape():
                _, logits = model(Tensor(images[idx]))
                loss = cross_entropy(logits, labels[idx])
            _check_finite(loss, step)
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            record = {"step": step, "loss": loss.item()}
            if step % cfg.eval_interval == 0 or step == cfg.optim.steps:
                record["train_accuracy"] = classification_accuracy(coarse_predictions(model, images), labels)
                log.info("coarse step %d loss %.5f acc %.4f", step, record["loss"], record["train_accuracy"])
            history.append(record)
    result = TrainResult(model, history, seconds=time.perf_counter() - t0)
    if cfg.checkpoint:
        result.checkpoint = save_checkpoint(cfg.checkpoint, model, cfg.to_dict(), "coarse", cfg.optim.steps,
                                            prefix=CoarseBranch.PREFIX)
    _write_log(cfg.log, history)
    return result


# --- stage 2 ------------------------------------------------------------------


def _model_dtype(model: Module):
    params = model.parameters()
    return params[0].dtype if params else T.get_default_dtype()


def predict_logits(model: SKSModel, images: np.ndarray, batch: int = 8) -> np.ndarray:
    dtype = _model_dtype(model)
    out = []
    with T.no_tape():
        for idx in _batches(len(images), batch):
            out.append(model(Tensor(images[idx], dtype=dtype)).mask_logits.data)
    return np.concatenate(out)


def segmentation_counts(model: SKSModel, samples: list[Sample], batch: int = 8) -> tuple[ConfusionCounts, list[float]]:
    images, masks, _ = stack_samples(samples)
    pred = predict_mask(predict_logits(model, images, batch))[..., 0]
    total = ConfusionCounts()
    per_case = []
    for p, m in zip(pred, masks):
        c = ConfusionCounts.from_masks(p, m)
        per_case.append(c.metrics()["dsc"])
        total = total + c
    return total, per_case


def build_seg_model(cfg: TrainConfig, coarse: Checkpoint | None = None) -> SKSModel:
    """SKS model for ``cfg.ablation``; loads and freezes the coarse branch when present."""
    with T.precision(cfg.precision):
        model = SKSModel(cfg.model, cfg.ablation, seed=cfg.seed)
    if model.has_coarse:
        if coarse is None:
            raise ConfigError("stage 'seg' needs a coarse checkpoint unless no_coarse_branch is set")
        if coarse.stage != "coarse":
            raise CheckpointError(f"expected a stage 'coarse' checkpoint, got stage {coarse.stage!r}")
        load_into(model, coarse, only="coarse.")
        model.coarse.requires_grad_(False)
    return model


def train_seg(cfg: TrainConfig, dataset: Dataset | None = None, coarse: Checkpoint | str | Path | None = None) -> TrainResult:
    """Stage 2: train fine encoder, fusion layers and decoder with dice loss; the coarse branch stays frozen."""
    cfg.validate()
    if cfg.stage != "seg":
        raise ConfigError(f"train_seg needs stage 'seg', config says {cfg.stage!r}")
    if cfg.ablation.no_coarse_branch:
        coarse = None
    elif coarse is None and cfg.coarse_checkpoint:
        coarse = cfg.coarse_checkpoint
    if isinstance(coarse, (str, Path)):
        coarse = load_checkpoint(coarse)
    dataset = dataset if dataset is not None else load_dataset(cfg.dataset)
    samples = _split(dataset, cfg.train_split)
    images, masks, _ = stack_samples(samples)
    t0 = time.perf_counter()
    model = build_seg_model(cfg, coarse)
    with T.precision(cfg.precision):
        images = images.astype(T.get_default_dtype())
        opt = SGD(model.seg_parameters(), cfg.optim.lr, cfg.optim.momentum)
        sampler = BatchSampler(len(images), cfg.optim.batch, cfg.seed, stream=2)
        history = []
        for step in range(1, cfg.optim.steps + 1):
            idx = sampler.next()
            with T.Tape():
                out = model(Tensor(images[idx]))
                loss = dice_loss(T.sigmoid(out.mask_logits), masks[idx])
            _check_finite(loss, step)
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            record = {"step": step, "loss": loss.item()}
            if step % cfg.eval_interval == 0 or step == cfg.optim.steps:
                counts, _ = segmentation_counts(model, samples)
                record["train_dsc"] = counts.metrics()["dsc"]
                log.info("seg step %d loss %.5f dsc %.4f", step, record["loss"], record["train_dsc"])
            history.append(record)
    result = TrainResult(model, history, seconds=time.perf_counter() - t0)
    if cfg.checkpoint:
        result.checkpoint = save_checkpoint(cfg.checkpoint, model, cfg.to_dict(), "seg", cfg.optim.steps)
    _write_log(cfg.log, history)
    return result


# --- evaluation / inference -----------------------------------------------------


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[Module, TrainConfig]:
    """Rebuild the model a checkpoint was saved from and load it (strict topology)."""
    cfg = train_config_from_dict(ckpt.config)
    with T.precision(cfg.precision):
        if ckpt.stage == "coarse":
            model = CoarseBranch(cfg.model, seed=cfg.seed)
            load_into(model, ckpt, prefix=CoarseBranch.PREFIX)
        else:
            model = SKSModel(cfg.model, cfg.ablation, seed=cfg.seed)
            load_into(model, ckpt)
    return model, cfg


@dataclass
class EvalResult:
    method: str
    counts: ConfusionCounts
    metrics: dict[str, float]
    per_case_dsc: list[float]

    def row(self) -> dict:
        m = self.metrics
        return {"method": self.method, "dsc": m["dsc"], "jc": m["jaccard"],
                "precision": m["precision"], "recall": m["recall"]}


def evaluate(model: SKSModel, samples: list[Sample], method: str = "SKS", batch: int = 8) -> EvalResult:
    """Global (pooled-count) DSC / JC / precision / recall over ``samples``."""
    if not samples:
        raise ValueError("cannot evaluate an empty split")
    counts, per_case = segmentation_counts(model, samples, batch)
    return EvalResult(method, counts, counts.metrics(), per_case)


def evaluate_checkpoint(ckpt_path, split: str, dataset_path=None) -> EvalResult:
    ckpt = load_checkpoint(ckpt_path)
    if ckpt.stage != "seg":
        raise CheckpointError("evaluation needs a stage 'seg' checkpoint")
    model, cfg = model_from_checkpoint(ckpt)
    dataset = load_dataset(dataset_path or cfg.dataset)
    return evaluate(model, dataset.split(split), method=cfg.ablation.label())


def format_csv(rows: list[dict], fields: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items() if k in fields})
    return buf.getvalue()


ABLATION_FIELDS = CSV_FIELDS + ["reported_dsc", "trainable_params", "total_params", "status"]


def run_ablation(cfg: TrainConfig, out_dir, dataset: Dataset | None = None) -> list[dict]:
    """Train and evaluate the four ablation variants from one shared coarse checkpoint."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not cfg.coarse_checkpoint or not Path(cfg.coarse_checkpoint).exists():
        raise ConfigError("ablation needs an existing coarse checkpoint (run train-coarse first)")
    coarse = load_checkpoint(cfg.coarse_checkpoint)
    dataset = dataset if dataset is not None else load_dataset(cfg.dataset)
    rows = []
    for label, flags in ABLATION_VARIANTS:
        slug = label.replace("/", "").replace(" ", "_").replace("(", "").replace(")", "")
        variant = cfg.replace(stage="seg", ablation=flags, checkpoint=str(out_dir / f"{slug}.skpt"),
                              log=str(out_dir / f"{slug}.log.jsonl"))
        row = {"method": label, "dsc": "", "jc": "", "precision": "", "recall": "", "reported_dsc": REPORTED_DSC[label],
               "trainable_params": "", "total_params": "", "status": "ok"}
        try:
            result = train_seg(variant, dataset, coarse)
            model = result.model
            row.update(evaluate(model, dataset.split(cfg.eval_split), label).row())
            row["trainable_params"] = sum(p.size for p in model.seg_parameters())
            row["total_params"] = model.num_parameters()
        except Exception as exc:  # one failing variant must not sink the others
            log.exception("ablation variant %s failed", label)
            row["status"] = f"failed: {type(exc).__name__}: {exc}"
        rows.append(row)
    (out_dir / "ablation.csv").write_text(format_csv(rows, ABLATION_FIELDS))
    return rows


def infer(ckpt_path, input_path, out_prefix) -> tuple[np.ndarray, np.ndarray]:
    """Write ``{out_prefix}.mask.pgm`` and ``{out_prefix}.logits.skst`` for one [H, W, 3] image."""
    ckpt = load_checkpoint(ckpt_path)
    if ckpt.stage != "seg":
        raise CheckpointError("inference needs a stage 'seg' checkpoint")
    model, cfg = model_from_checkpoint(ckpt)
    image = load_tensor(input_path)
    expected = (cfg.model.image_size, cfg.model.image_size, cfg.model.in_channels)
    if image.shape != expected:
        raise ValueError(f"input image has shape {image.shape}, model expects {expected}")
    logits = predict_logits(model, image[None])[0]
    mask = predict_mask(logits)[..., 0]
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    save_tensor(f"{out_prefix}.logits.skst", logits, name="mask_logits")
    save_pgm(f"{out_prefix}.mask.pgm", mask)
    return mask, logits
