"""Joint action/reasoning training loop with selective parameter updates,
plateau-based stopping, checkpointing, and ablation sweeps."""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .autodiff import Tape, Tensor
from .data import AnnotatedDataset, StepRecord, sample_minibatch
from .model import (
    ConfigError,
    ForwardOutput,
    ModelConfig,
    ParamStore,
    forward,
    init_params,
    save_checkpoint,
)
from .sim import TASKS, derive_seed, render, step_budget
from .vocab import Vocabulary

METRICS_HEADER = "step,L_action,L_reasoning,L_total,val_success,wall_ms"


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; the run aborts with diagnostics."""


@dataclass
class TrainConfig:
    lambda_r: float = 0.3
    learning_rate: float = 3e-4
    batch_size: int = 16
    max_steps: int = 5000
    eval_interval: int = 500
    patience: int = 4
    optimizer: str = "adam"
    seed: int = 0
    frozen_blocks: int | None = None  # None: take the model config's value
    freeze_embeddings: bool | None = None
    grad_clip: float | None = 1.0
    val_episodes_per_task: int = 8
    val_fraction: float = 0.1
    strict_sum: bool = False
    action_only: bool = False  # drop the reasoning loss from the graph entirely
    min_improvement: float = 0.005

    def __post_init__(self):
        if self.lambda_r < 0:
            raise ConfigError("lambda_r must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")

    def to_json(self) -> dict:
        d = dict(self.__dict__)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class MetricsRow:
    step: int
    l_action: float
    l_reasoning: float
    l_total: float
    val_success: float | None
    wall_ms: float

    def csv_line(self) -> str:
        val = "" if self.val_success is None else repr(self.val_success)
        return (
            f"{self.step},{self.l_action!r},{self.l_reasoning!r},"
            f"{self.l_total!r},{val},{self.wall_ms:.3f}"
        )


def write_metrics_csv(rows: list[MetricsRow], path) -> None:
    lines = [METRICS_HEADER] + [r.csv_line() for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


# ---- losses -----------------------------------------------------------------


def action_nll(tape: Tape, output: ForwardOutput, action_ids: list[int]) -> Tensor:
    """Mean NLL over the action positions of a teacher-forced forward."""
    targets = np.asarray(action_ids, dtype=np.intp)
    mask = np.ones(len(action_ids), dtype=bool)
    return tape.nll_loss(output.action_logits, targets, mask)


def reasoning_nll(
    tape: Tape,
    output: ForwardOutput,
    rationale_ids: list[int],
    pad_mask: np.ndarray | None = None,
    pad_id: int | None = None,
) -> Tensor:
    """Mean NLL over non-pad rationale positions."""
    targets = np.asarray(rationale_ids, dtype=np.intp)
    if pad_mask is None:
        if pad_id is None:
            pad_mask = np.ones(len(rationale_ids), dtype=bool)
        else:
            pad_mask = targets != pad_id
    return tape.nll_loss(output.rationale_logits, targets, np.asarray(pad_mask, dtype=bool))


def joint_loss(tape: Tape, l_action: Tensor, l_reasoning: Tensor, lambda_r: float) -> Tensor:
    if lambda_r < 0:
        raise ConfigError("lambda_r must be non-negative")
    return tape.add(l_action, tape.scale(l_reasoning, lambda_r))


# ---- optimizers ---------------------------------------------------------------


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: ParamStore) -> None:
        for _, t in params.trainable():
            if t.grad is not None:
                t.data -= self.lr * t.grad


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: ParamStore) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, tensor in params.trainable():
            if tensor.grad is None:
                continue
            g = tensor.grad
            m = self._m.setdefault(name, np.zeros_like(g))
            v = self._v.setdefault(name, np.zeros_like(g))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            tensor.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(kind: str, lr: float):
    if kind == "adam":
        return Adam(lr)
    if kind == "sgd":
        return SGD(lr)
    raise ConfigError(f"unknown optimizer {kind!r}")


def clip_gradients(params: ParamStore, max_norm: float) -> float:
    total = 0.0
    grads = [t.grad for _, t in params.trainable() if t.grad is not None]
    for g in grads:
        total += float(np.sum(g * g))
    norm = total**0.5
    if norm > max_norm:
        factor = max_norm / norm
        for g in grads:
            g *= factor
    return norm


# ---- steps and the loop --------------------------------------------------------


def _sample_losses(
    tape: Tape,
    params: ParamStore,
    model_cfg: ModelConfig,
    vocab: Vocabulary,
    record: StepRecord,
    strict_sum: bool,
) -> tuple[Tensor, Tensor]:
    image = render(record.scene, record.variant)
    out = forward(
        params,
        model_cfg,
        vocab,
        image,
        record.instruction_ids,
        record.rationale_ids,
        [record.action_id],
        tape=tape,
    )
    l_a = action_nll(tape, out, [record.action_id])
    l_r = reasoning_nll(tape, out, record.rationale_ids, pad_id=vocab.pad_id)
    if strict_sum:
        n_r = int(np.sum(np.asarray(record.rationale_ids) != vocab.pad_id))
        l_r = tape.scale(l_r, float(n_r))
    return l_a, l_r


def train_step(
    params: ParamStore,
    batch: list[StepRecord],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    vocab: Vocabulary,
    optimizer,
    step_index: int,
) -> MetricsRow:
    """One optimization step: forward, both losses, backward, clipped update.

    Each sample runs on its own tape; gradients accumulate across the batch
    scaled by 1/B, which equals backpropagating the batch-mean objective.
    """
    t0 = time.perf_counter()
    for _, t in params.trainable():
        t.zero_grad()

    inv_b = 1.0 / len(batch)
    l_a_vals: list[float] = []
    l_r_vals: list[float] = []
    for record in batch:
        tape = Tape()
        l_a, l_r = _sample_losses(tape, params, model_cfg, vocab, record, train_cfg.strict_sum)
        if train_cfg.action_only:
            total = l_a
        else:
            total = joint_loss(tape, l_a, l_r, train_cfg.lambda_r)
        tape.backward(tape.scale(total, inv_b))
        l_a_vals.append(float(l_a.data))
        l_r_vals.append(float(l_r.data))

    l_action = float(np.mean(l_a_vals))
    l_reasoning = float(np.mean(l_r_vals))
    l_total = l_action + train_cfg.lambda_r * l_reasoning
    if not np.isfinite(l_total):
        raise DivergenceError(
            f"non-finite loss at step {step_index}: "
            f"L_action={l_action} L_reasoning={l_reasoning}"
        )
    if train_cfg.grad_clip is not None:
        clip_gradients(params, train_cfg.grad_clip)
    optimizer.step(params)

    return MetricsRow(
        step=step_index,
        l_action=l_action,
        l_reasoning=l_reasoning,
        l_total=l_total,
        val_success=None,
        wall_ms=(time.perf_counter() - t0) * 1000.0,
    )


def _validation_episodes(val_ds: AnnotatedDataset, per_task: int):
    """First N held-out (task, seed, variant) triples per task, in dataset order."""
    chosen: dict[str, list] = {}
    seen: set[tuple[str, int]] = set()
    for rec in val_ds.steps:
        key = (rec.task_name, rec.episode)
        if key in seen:
            continue
        seen.add(key)
        lst = chosen.setdefault(rec.task_name, [])
        if len(lst) < per_task:
            lst.append((rec.task_name, rec.episode_seed, rec.variant))
    episodes = []
    for task_name in chosen:
        episodes.extend(chosen[task_name])
    return episodes


def closed_loop_success(
    params: ParamStore,
    model_cfg: ModelConfig,
    vocab: Vocabulary,
    episodes,
    grid: int = 8,
) -> float:
    """Fraction of episodes the current policy completes within the step budget."""
    from .evalviz import ModelPolicy, rollout

    policy = ModelPolicy(params, model_cfg, vocab)
    wins = 0
    for task_name, seed, variant in episodes:
        result, _ = rollout(
            policy, TASKS[task_name], variant, seed, max_steps=step_budget(grid, grid), grid=grid
        )
        wins += int(result.success)
    return wins / len(episodes) if episodes else 0.0


@dataclass
class TrainResult:
    rows: list[MetricsRow]
    best_checkpoint: Path | None
    final_checkpoint: Path
    metrics_path: Path
    best_val_success: float
    steps_run: int
    stopped_early: bool


def resolve_model_config(model_cfg: ModelConfig, train_cfg: TrainConfig) -> ModelConfig:
    cfg = model_cfg
    if train_cfg.frozen_blocks is not None:
        cfg = replace(cfg, frozen_blocks=train_cfg.frozen_blocks)
    if train_cfg.freeze_embeddings is not None:
        cfg = replace(cfg, freeze_embeddings=train_cfg.freeze_embeddings)
    return cfg


def train_loop(
    train_ds: AnnotatedDataset,
    val_ds: AnnotatedDataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    vocab: Vocabulary,
    out_dir,
    grid: int = 8,
) -> TrainResult:
    """Run train_step until max_steps or the validation plateau, checkpointing
    best-by-validation and final. Fully determined by (seed, config, dataset)."""
    if not len(train_ds):
        raise ConfigError("training split is empty")
    if not len(val_ds):
        raise ConfigError("validation split is empty")
    out = Path(out_dir)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"

    cfg = resolve_model_config(model_cfg, train_cfg)
    params = init_params(cfg, train_cfg.seed)
    optimizer = make_optimizer(train_cfg.optimizer, train_cfg.learning_rate)
    rng = np.random.default_rng(derive_seed(train_cfg.seed, "minibatch") % (2**63))
    val_episodes = _validation_episodes(val_ds, train_cfg.val_episodes_per_task)

    rows: list[MetricsRow] = []
    best_val = float("-inf")
    best_path: Path | None = None
    final_path = ckpt_dir / "final.ckpt"
    stale_evals = 0
    stopped_early = False
    steps_run = 0

    def checkpoint(path: Path, tag: str, step: int, val: float | None) -> None:
        save_checkpoint(
            path,
            params,
            vocab.hash,
            metadata={"tag": tag, "step": step, "val_success": val, "seed": train_cfg.seed},
        )

    try:
        for step_index in range(1, train_cfg.max_steps + 1):
            batch = sample_minibatch(train_ds, train_cfg.batch_size, rng)
            row = train_step(params, batch, cfg, train_cfg, vocab, optimizer, step_index)
            steps_run = step_index
            if step_index % train_cfg.eval_interval == 0 or step_index == train_cfg.max_steps:
                val = closed_loop_success(params, cfg, vocab, val_episodes, grid=grid)
                row.val_success = val
                if val >= best_val + train_cfg.min_improvement:
                    best_val = val
                    stale_evals = 0
                    best_path = ckpt_dir / "best.ckpt"
                    checkpoint(best_path, "best", step_index, val)
                else:
                    stale_evals += 1
                rows.append(row)
                if stale_evals >= train_cfg.patience:
                    stopped_early = True
                    break
            else:
                rows.append(row)
    except DivergenceError:
        checkpoint(final_path, "final", steps_run, None)
        write_metrics_csv(rows, metrics_path)
        raise

    checkpoint(final_path, "final", steps_run, best_val if best_val > float("-inf") else None)
    write_metrics_csv(rows, metrics_path)
    return TrainResult(
        rows=rows,
        best_checkpoint=best_path,
        final_checkpoint=final_path,
        metrics_path=metrics_path,
        best_val_success=best_val if best_val > float("-inf") else 0.0,
        steps_run=steps_run,
        stopped_early=stopped_early,
    )


# ---- ablation sweeps -----------------------------------------------------------


SWEEP_AXES = ("lambda_r", "frozen_blocks")


def sweep(
    axis: str,
    values,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_ds: AnnotatedDataset,
    val_ds: AnnotatedDataset,
    vocab: Vocabulary,
    out_dir,
    grid: int = 8,
) -> list[dict]:
    """Independent seeded runs along one axis; emits one curve row per value.

    Per-run failures are recorded in the row and the sweep continues.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}")
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    deduped = list(dict.fromkeys(values))
    if len(deduped) != len(values):
        warnings.warn(f"duplicate sweep values removed: {values}", stacklevel=2)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    report: list[dict] = []
    for value in deduped:
        run_dir = out / f"{axis}_{value}"
        if axis == "lambda_r":
            run_train = replace(train_cfg, lambda_r=float(value))
        else:
            run_train = replace(train_cfg, frozen_blocks=int(value))
        row: dict = {"value": value, "axis": axis}
        if axis == "frozen_blocks":
            row["head_only"] = int(value) == model_cfg.layers
        try:
            result = train_loop(train_ds, val_ds, model_cfg, run_train, vocab, run_dir, grid=grid)
            row.update(
                {
                    "status": "ok",
                    "val_success": result.best_val_success,
                    "final_L_action": result.rows[-1].l_action if result.rows else None,
                    "final_L_reasoning": result.rows[-1].l_reasoning if result.rows else None,
                    "steps_run": result.steps_run,
                }
            )
        except Exception as exc:  # record and continue with the remaining values
            row.update({"status": "error", "error": f"{type(exc).__name__}: {exc}"})
        report.append(row)

    (out / "curve.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    return report
