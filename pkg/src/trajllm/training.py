"""Training loop, evaluation and the few-shot protocol."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from trajllm.checkpoint import save_checkpoint
from trajllm.config import TrainConfig
from trajllm.data.schema import SceneSample
from trajllm.metrics import MetricsReport
from trajllm.model import TrajLLM, build_model, collate, compute_losses, trainable_parameters
from trajllm.nn.backbone import FrozenGPT2

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ("step", "L_lane", "L_reg", "L_cls", "L_total")


class TrainingError(RuntimeError):
    pass


def few_shot_subset(samples: Sequence, ratio: float, seed: int = 0) -> list:
    """Seeded shuffle, then the first floor(ratio * n) items (at least one)."""
    if not 0 < ratio <= 1:
        raise ValueError("ratio must be in (0, 1]")
    n = len(samples)
    if n == 0:
        return []
    keep = max(1, math.floor(ratio * n))
    order = np.random.default_rng(seed).permutation(n)
    return [samples[i] for i in order[:keep]]


def batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


@dataclass
class TrainResult:
    model: TrajLLM
    history: list[dict] = field(default_factory=list)
    best_state: dict | None = None
    best_val: MetricsReport | None = None
    best_step: int = 0
    checkpoint_path: Path | None = None

    def load_best(self) -> TrajLLM:
        if self.best_state is not None:
            self.model.load_state_dict(self.best_state, strict=False)
        return self.model


def train(
    config: TrainConfig,
    train_scenes: Sequence[SceneSample],
    val_scenes: Sequence[SceneSample] | None = None,
    out_dir=None,
    base: FrozenGPT2 | None = None,
    on_step: Callable[[int, dict], None] | None = None,
) -> TrainResult:
    """Minimize lambda * L_lane + L_reg + L_cls over the trainable parameters only.

    Runs ``max_steps`` optimizer steps when set, otherwise ``epochs`` passes.
    Validation minADE picks the best checkpoint (written to ``out_dir``).
    """
    torch.manual_seed(config.seed)
    model = build_model(config, base)
    dtype = model.dtype
    scenes = few_shot_subset(list(train_scenes), config.few_shot_ratio, config.seed)
    if not scenes:
        raise TrainingError("empty training set")

    params = list(trainable_parameters(model).values())
    opt = torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    per_epoch = math.ceil(len(scenes) / config.batch_size)
    total_steps = config.max_steps if config.max_steps is not None else config.epochs * per_epoch
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: 0.5 * (1 + math.cos(math.pi * min(s, total_steps) / max(total_steps, 1)))
    )
    eval_every = config.eval_every or per_epoch
    rng = np.random.default_rng(config.seed)
    latent_gen = torch.Generator().manual_seed(config.seed + 1)

    result = TrainResult(model)
    out_dir = Path(out_dir) if out_dir is not None else None
    best_ade = math.inf
    step = 0
    while step < total_steps:
        for idx in batches(len(scenes), config.batch_size, rng):
            if step >= total_steps:
                break
            model.train()
            batch = collate([scenes[i] for i in idx], dtype)
            losses = compute_losses(model, model(batch, generator=latent_gen), batch)
            values = {k: float(losses[k].detach()) for k in ("lane", "reg", "cls", "total")}
            if not all(math.isfinite(v) for v in values.values()):
                raise TrainingError(
                    f"non-finite loss at step {step}: "
                    + ", ".join(f"{k}={v}" for k, v in values.items())
                )
            opt.zero_grad(set_to_none=True)
            losses["total"].backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
            opt.step()
            sched.step()
            step += 1
            row = {"step": step, "L_lane": values["lane"], "L_reg": values["reg"],
                   "L_cls": values["cls"], "L_total": values["total"]}
            result.history.append(row)
            if on_step is not None:
                on_step(step, row)

            if step % eval_every == 0 or step == total_steps:
                report = evaluate(model, val_scenes) if val_scenes else None
                ade = report.min_ade if report else -step  # no validation: keep the latest
                if ade < best_ade:
                    best_ade = ade
                    result.best_val = report
                    result.best_step = step
                    result.best_state = copy.deepcopy(
                        {k: v for k, v in model.state_dict().items()}
                    )
                    if out_dir is not None:
                        result.checkpoint_path = save_checkpoint(
                            model, out_dir / "checkpoint.safetensors", {"step": step}
                        )
                if report:
                    logger.info("step %d val minADE %.3f", step, report.min_ade)
    return result


@torch.no_grad()
def predict(model: TrajLLM, scenes: Sequence[SceneSample], batch_size: int = 64):
    """Deterministic forward pass; returns numpy (pi (S,K), mu (S,K,T,2), b (S,K,T,2), lane_probs list)."""
    model.eval()
    pis, mus, bs, lanes = [], [], [], []
    for s in range(0, len(scenes), batch_size):
        chunk = list(scenes[s:s + batch_size])
        batch = collate(chunk, model.dtype)
        out = model(batch)
        mix = out["mixture"]
        pis.append(mix.pi.double().numpy())
        if model.config.debug_perfect_predictor:  # exact copy, no float32 round trip
            mus.append(np.repeat(np.stack([s.gt_future for s in chunk])[:, None], mix.mu.shape[1], axis=1))
        else:
            mus.append(mix.mu.double().numpy())
        bs.append(mix.b.double().numpy())
        probs = out["lane_probs"]
        for i in range(len(chunk)):
            lanes.append(None if probs is None else probs[i].double().numpy())
    return np.concatenate(pis), np.concatenate(mus), np.concatenate(bs), lanes


def evaluate(model: TrajLLM, scenes: Sequence[SceneSample], k_modes: int | None = None,
             batch_size: int = 64) -> MetricsReport:
    """minADE / minFDE / miss rate with the latent zeroed and dropout off."""
    if k_modes is not None and k_modes != model.config.k_modes:
        raise ValueError(f"k_modes {k_modes} does not match the model's {model.config.k_modes}")
    if not scenes:
        raise ValueError("no scenes to evaluate")
    _, mu, _, _ = predict(model, scenes, batch_size)
    gt = np.stack([s.gt_future for s in scenes])
    return MetricsReport.from_predictions(mu, gt)


def lane_top1_accuracy(model: TrajLLM, scenes: Sequence[SceneSample]) -> float:
    """Fraction of (scene, future step) pairs whose highest-probability lane is the labeled one."""
    _, _, _, probs = predict(model, scenes)
    hits = total = 0
    for s, p in zip(scenes, probs):
        if p is None:
            raise ValueError("model has no lane module")
        pred = p.argmax(axis=0)  # (T,)
        label = s.lane_labels[:, : p.shape[0]].argmax(axis=1)
        hits += int((pred == label).sum())
        total += len(label)
    return hits / total


def write_history(history: list[dict], path) -> None:
    lines = [",".join(HISTORY_COLUMNS)]
    for row in history:
        lines.append(",".join(str(row["step"]) if c == "step" else repr(row[c]) for c in HISTORY_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n")
