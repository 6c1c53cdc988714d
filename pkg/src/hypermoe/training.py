"""Adam optimizer, training loop with divergence guard, and evaluation."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import DivergenceError
from .model import ForwardResult, Model
from .tasks import SyntheticTask, generate_task_batch
from .tensor import Rng, Tape, Tensor

METRICS_HEADER = ["step", "task_loss", "aux_loss", "total_loss", "util_entropy"]


class Adam:
    """Adam with linear learning-rate warm-up over the first warmup_steps."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        warmup_steps: int = 0,
        total_steps: int = 0,
    ) -> None:
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.warmup_steps = warmup_steps
        self.total_steps = total_steps
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        lr = self.lr
        if self.warmup_steps > 0:
            lr *= min(1.0, self.t / self.warmup_steps)
        if self.total_steps > self.warmup_steps and self.t > self.warmup_steps:
            # cosine decay to 10% of peak after warm-up
            frac = (self.t - self.warmup_steps) / (self.total_steps - self.warmup_steps)
            lr *= 0.55 + 0.45 * np.cos(np.pi * min(1.0, frac))
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad * p.grad
            p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


def task_loss(result: ForwardResult, targets, kind: str) -> Tensor:
    if kind == "classification":
        return T.softmax_cross_entropy(result.outputs, targets)
    return T.mse(result.outputs, Tensor(np.asarray(targets, dtype=np.float64)[:, None]))


def utilization_histogram(result: ForwardResult, n_experts: int) -> np.ndarray:
    """Token-to-expert assignment counts summed over MoE layers."""
    hist = np.zeros(n_experts)
    for d in result.decisions:
        hist += d.binary_mask.sum(axis=0)
    return hist


def utilization_entropy(hist: np.ndarray) -> float:
    total = hist.sum()
    if total == 0:
        return 0.0
    p = hist[hist > 0] / total
    return float(-(p * np.log(p)).sum())


def combined_loss(result: ForwardResult, targets, task: SyntheticTask, cfg: ModelConfig) -> tuple[Tensor, float, float]:
    """Total loss plus (task, aux) scalars for logging."""
    base = task_loss(result, targets, task.kind)
    if result.aux_losses and cfg.aux_loss_coef > 0:
        aux = result.aux_losses[0]
        for a in result.aux_losses[1:]:
            aux = aux + a
        aux = aux * (1.0 / len(result.aux_losses))
        total = base + aux * cfg.aux_loss_coef
        return total, base.item(), aux.item()
    mean_aux = (
        float(np.mean([a.item() for a in result.aux_losses])) if result.aux_losses else 0.0
    )
    return base, base.item(), mean_aux


def train_model(model: Model, metrics_path: str | None = None) -> list[dict]:
    """Run the configured number of steps; returns one metrics row per step."""
    cfg = model.cfg
    task = model.task
    data_rng = Rng(cfg.seed).spawn("data")
    noise_rng = Rng(cfg.seed).spawn("noise")
    warmup = int(cfg.warmup_frac * cfg.steps)
    opt = Adam(model.params, lr=cfg.learning_rate, warmup_steps=warmup, total_steps=cfg.steps)
    rows: list[dict] = []
    for step in range(cfg.steps):
        inputs, targets = generate_task_batch(task, data_rng, cfg.batch_size)
        with Tape():
            result = model.forward(inputs, training=True, noise_rng=noise_rng)
            total, task_l, aux_l = combined_loss(result, targets, task, cfg)
            if not np.isfinite(total.item()):
                raise DivergenceError(step)
            total.backward()
        opt.step()
        model.zero_grads()
        hist = utilization_histogram(result, cfg.n_experts)
        rows.append(
            {
                "step": step,
                "task_loss": task_l,
                "aux_loss": aux_l,
                "total_loss": total.item(),
                "util_entropy": utilization_entropy(hist),
            }
        )
    if metrics_path is not None:
        write_metrics_csv(metrics_path, rows)
    return rows


def write_metrics_csv(path: str, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=METRICS_HEADER)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def evaluate(model: Model, n: int, chunk: int = 512) -> dict:
    """Deterministic (noise-free) metrics over n fresh eval samples."""
    task = model.task
    inputs, targets = task.eval_set(n)
    n_experts = model.cfg.n_experts
    hist = np.zeros(n_experts)
    correct = 0
    sq_err = 0.0
    total = len(targets)
    for lo in range(0, total, chunk):
        hi = min(lo + chunk, total)
        batch_inputs = (
            inputs[lo:hi] if task.kind == "classification" else (inputs[0][lo:hi], inputs[1][lo:hi])
        )
        with Tape():
            result = model.forward(batch_inputs, training=False)
        hist += utilization_histogram(result, n_experts)
        if task.kind == "classification":
            preds = result.outputs.data.argmax(axis=1)
            correct += int((preds == targets[lo:hi]).sum())
        else:
            diff = result.outputs.data[:, 0] - targets[lo:hi]
            sq_err += float((diff * diff).sum())
    metrics = {"n": total, "utilization": hist.tolist(), "util_entropy": utilization_entropy(hist)}
    if task.kind == "classification":
        metrics["accuracy"] = correct / total
    else:
        metrics["mse"] = sq_err / total
    return metrics
