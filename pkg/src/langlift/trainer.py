"""Stage training loop with adapter-only updates and exact resumability.

Every run is a pure function of (model state, dataset, config): batch
order derives from (seed, epoch), dropout noise from (seed, step), and
the learning rate from the step index alone, so a run resumed from a
checkpoint at step k reproduces the uninterrupted run bit for bit.
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .datapipe import PackedDataset, TrainExample
from .model import (ModelBundle, attach_adapters, forward, load_bundle,
                    merge_adapters, save_bundle, set_trainable)

STAGES = ("target-cpt", "translation-cpt", "transform-sft")


class TrainerError(RuntimeError):
    pass


class TrainingDiverged(TrainerError):
    def __init__(self, step: int):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step


@dataclass
class StageConfig:
    stage: str
    peak_lr: float = 2e-4
    warmup_ratio: float = 0.01
    schedule: str = "cosine"
    weight_decay: float = 0.0
    batch_size: int = 8
    grad_accum: int = 1
    max_epochs: int = 1
    cosine_horizon_epochs: int | None = None  # schedule horizon; None = max_epochs
    valid_every: int = 400
    seed: int = 0
    max_steps: int | None = None              # optional hard cap inside the epoch budget

    def __post_init__(self):
        if self.stage not in STAGES:
            raise TrainerError(f"unknown stage {self.stage!r}")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise TrainerError("warmup_ratio must be in [0, 1)")
        if self.valid_every < 1:
            raise TrainerError("valid_every must be at least 1")
        if self.schedule != "cosine":
            raise TrainerError("only the cosine schedule is implemented")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AblationToggles:
    use_lora: bool = True
    use_rkd: bool = True
    use_tcot: bool = True
    teacher: str = "original"          # "original" | "external"
    template: str = "special-tokens"   # "special-tokens" | "natural-language"

    def __post_init__(self):
        if not (self.use_rkd or self.use_tcot):
            # the direct-SFT ablation replaces both with target-language data
            pass
        if self.teacher not in ("original", "external"):
            raise TrainerError(f"unknown teacher {self.teacher!r}")
        if self.template not in ("special-tokens", "natural-language"):
            raise TrainerError(f"unknown template style {self.template!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(step: int, total_steps: int, config: StageConfig) -> float:
    """Linear warmup from 0 to peak, then cosine down toward 0 at the
    horizon. Pure function of the step index and the config."""
    horizon_epochs = config.cosine_horizon_epochs or config.max_epochs
    horizon = max(1, int(round(total_steps * horizon_epochs / max(1, config.max_epochs))))
    warmup = int(math.floor(config.warmup_ratio * horizon))
    if warmup > 0 and step < warmup:
        return config.peak_lr * step / warmup
    progress = (step - warmup) / max(1, horizon - warmup)
    progress = min(progress, 1.0)
    return config.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay. Moment buffers exist only for
    parameters that actually received gradients."""

    def __init__(self, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def step(self, named_params, lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        correct1 = 1.0 - b1 ** self.step_count
        correct2 = 1.0 - b2 ** self.step_count
        for name, tensor in named_params:
            if tensor.grad is None:
                continue
            g = tensor.grad
            if name not in self.moments:
                self.moments[name] = (np.zeros_like(tensor.data), np.zeros_like(tensor.data))
            m, v = self.moments[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / correct1) / (np.sqrt(v / correct2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * tensor.data
            tensor.data = tensor.data - np.asarray(lr, dtype=tensor.dtype) * update.astype(tensor.dtype)
            tensor.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, (m, v) in self.moments.items():
            out[f"opt.m.{name}"] = m
            out[f"opt.v.{name}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        self.step_count = step_count
        self.moments = {}
        pairs: dict[str, dict[str, np.ndarray]] = {}
        for key, arr in arrays.items():
            if key.startswith("opt.m."):
                pairs.setdefault(key[len("opt.m."):], {})["m"] = arr
            elif key.startswith("opt.v."):
                pairs.setdefault(key[len("opt.v."):], {})["v"] = arr
        for name, mv in pairs.items():
            self.moments[name] = (mv["m"], mv["v"])


def example_loss(bundle: ModelBundle, example: TrainExample,
                 training: bool = False, rng=None) -> nc.Tensor:
    """Masked next-token cross entropy for one sequence.

    Trailing padding is trimmed before the forward pass: targets end
    every sequence, so nothing real follows the last masked position,
    and identical records then produce bit-identical losses regardless
    of how wide their batch was padded.
    """
    live = np.nonzero(example.loss_mask)[0]
    if live.size == 0:
        raise TrainerError("example has no target positions")
    n = int(live[-1]) + 1
    ids = example.ids[:n].tolist()
    out = forward(ids, bundle.weights, bundle.adapters, training=training, rng=rng)
    # logits at position t predict token t+1
    return nc.cross_entropy(out.logits, ids[1:] + [0],
                            list(example.loss_mask[1:n]) + [False])


def evaluate_validation(bundle: ModelBundle, examples) -> float:
    """Mean of per-record masked losses; pure, no parameter mutation."""
    examples = list(examples)
    if not examples:
        raise TrainerError("validation set is empty")
    losses = [example_loss(bundle, ex).item() for ex in examples]
    return float(np.mean(losses))


def _step_plan(n_examples: int, config: StageConfig) -> list[list[int]]:
    """Example indices consumed by each optimizer step, for all epochs.

    Planning at the example level makes batch_size x grad_accum
    arithmetically one batch: (8, 1) and (4, 2) consume identical record
    sequences.
    """
    plan = []
    per_step = config.batch_size * max(1, config.grad_accum)
    for epoch in range(config.max_epochs):
        order = np.random.default_rng([config.seed, 401, epoch]).permutation(n_examples)
        for start in range(0, n_examples, per_step):
            plan.append([int(i) for i in order[start:start + per_step]])
    if config.max_steps is not None:
        plan = plan[:config.max_steps]
    return plan


def train_stage(bundle: ModelBundle, dataset: PackedDataset, config: StageConfig,
                toggles: AblationToggles | None = None, valid_examples=None,
                optimizer: AdamW | None = None, start_step: int = 0,
                select_best: bool = False, log=None) -> tuple[list[dict], AdamW]:
    """Run one training stage; returns (metrics, optimizer).

    Under use_lora the base projections and norms stay frozen and the
    adapters, embeddings, and head train; otherwise everything trains.
    Gradients of an optimizer step are the exact mean over all records
    in its accumulation window, so grad_accum x batch_size is
    arithmetically one batch.
    """
    toggles = toggles or AblationToggles()
    if dataset.kind != config.stage:
        raise TrainerError(
            f"dataset kind {dataset.kind!r} does not match stage {config.stage!r}")
    if toggles.use_lora and bundle.adapters is None:
        raise TrainerError("use_lora requires attached adapters")
    if not toggles.use_lora and bundle.adapters is not None:
        raise TrainerError("full-parameter training must not have adapters attached")
    set_trainable(bundle, "lora" if toggles.use_lora else "full")

    if optimizer is None:
        optimizer = AdamW(weight_decay=config.weight_decay)
    examples = dataset.examples
    plan = _step_plan(len(examples), config)
    total_steps = len(plan)
    metrics: list[dict] = []
    best_loss = None
    best_state: dict[str, np.ndarray] | None = None

    params = list(bundle.named_parameters())
    for step in range(start_step, total_steps):
        records = [examples[i] for i in plan[step]]
        rng = np.random.default_rng([config.seed, 402, step])
        inv_n = 1.0 / len(records)
        step_loss = 0.0
        for ex in records:
            # one tape per record; leaf grads accumulate across records
            with nc.tape():
                loss = example_loss(bundle, ex, training=True, rng=rng)
                step_loss += loss.item()
                nc.backward(nc.scale(loss, inv_n))
        step_loss *= inv_n
        if not math.isfinite(step_loss):
            raise TrainingDiverged(step)
        lr = lr_at(step, total_steps, config)
        optimizer.step(params, lr)

        entry = {"step": step, "lr": lr, "train_loss": step_loss}
        if valid_examples is not None and (step + 1) % config.valid_every == 0:
            vloss = evaluate_validation(bundle, valid_examples)
            entry["valid_loss"] = vloss
            if select_best and (best_loss is None or vloss < best_loss):
                best_loss = vloss
                best_state = {n: t.data.copy() for n, t in params if t.requires_grad}
        metrics.append(entry)
        if log is not None:
            log(entry)

    if select_best and best_state is not None:
        final = evaluate_validation(bundle, valid_examples)
        if best_loss < final:
            for n, t in params:
                if n in best_state:
                    t.data = best_state[n]
    return metrics, optimizer


def approx_full_ft(bundle: ModelBundle, seed: int) -> ModelBundle:
    """Fold the trained adapters into the base weights and attach fresh
    zero ones, approximating a full-parameter stage boundary."""
    if bundle.adapters is None:
        raise TrainerError("no adapters attached")
    merge_adapters(bundle.weights, bundle.adapters)
    attach_adapters(bundle, seed=seed)
    return bundle


def save_checkpoint(bundle: ModelBundle, optimizer: AdamW | None, path: str,
                    step: int = 0, stage: str = "", extra: dict | None = None) -> None:
    meta = {"step": step, "stage": stage,
            "optimizer_step_count": optimizer.step_count if optimizer else 0}
    if extra:
        meta.update(extra)
    save_bundle(bundle, path, extra_meta=meta)
    if optimizer is not None and optimizer.moments:
        opt_dir = os.path.join(path, "optimizer")
        from .model import write_checkpoint
        write_checkpoint(opt_dir, optimizer.state_arrays(),
                         {"step_count": optimizer.step_count})


def load_checkpoint(path: str, expect_vocab_hash: str | None = None):
    """Returns (bundle, optimizer-or-None, meta)."""
    bundle, meta = load_bundle(path, expect_vocab_hash=expect_vocab_hash)
    optimizer = None
    opt_dir = os.path.join(path, "optimizer")
    if os.path.isdir(opt_dir):
        from .model import read_checkpoint
        arrays, opt_meta = read_checkpoint(opt_dir)
        optimizer = AdamW()
        optimizer.load_state_arrays(arrays, int(opt_meta["step_count"]))
    return bundle, optimizer, meta
