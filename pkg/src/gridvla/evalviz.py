"""Closed-loop evaluation tables, attention-alignment analysis, heatmaps, and curves."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .model import (
    ModelConfig,
    ParamStore,
    decide_action,
    extract_attention,
    load_checkpoint,
)
from .sim import (
    TASKS,
    Action,
    EpisodeResult,
    Scene,
    Splitmix,
    Task,
    VariantSpec,
    VISUAL_MATCHING,
    derive_seed,
    expert_action,
    make_variant,
    render,
    reset,
    scene_hash,
    step,
    step_budget,
)
from .vocab import Vocabulary


class CompatibilityError(ValueError):
    pass


class MetricError(ValueError):
    pass


class PlotError(ValueError):
    pass


@dataclass
class EvalConfig:
    episodes_per_task: int = 50
    modes: tuple[str, ...] = (VISUAL_MATCHING,)
    max_steps: int = 64
    seed_base: int = 0
    grid: int = 8
    tasks: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.episodes_per_task < 1:
            raise MetricError("episodes_per_task must be >= 1")

    def task_names(self) -> tuple[str, ...]:
        return self.tasks if self.tasks is not None else tuple(TASKS)

    def to_json(self) -> dict:
        return {
            "episodes_per_task": self.episodes_per_task,
            "grid": self.grid,
            "max_steps": self.max_steps,
            "modes": list(self.modes),
            "seed_base": self.seed_base,
            "tasks": None if self.tasks is None else list(self.tasks),
        }


# ---- policies ----------------------------------------------------------------


class ModelPolicy:
    """Wraps model parameters as a closed-loop policy (image + instruction in, action out)."""

    def __init__(self, params: ParamStore, cfg: ModelConfig, vocab: Vocabulary):
        self.params = params
        self.cfg = cfg
        self.vocab = vocab
        self._instr_cache: dict[str, list[int]] = {}

    @classmethod
    def from_checkpoint(cls, path, vocab: Vocabulary) -> "ModelPolicy":
        params, cfg, vocab_hash, _ = load_checkpoint(path)
        if vocab_hash != vocab.hash:
            raise CompatibilityError(f"checkpoint {path} was trained with a different vocabulary")
        return cls(params, cfg, vocab)

    def instruction_ids(self, task: Task) -> list[int]:
        ids = self._instr_cache.get(task.name)
        if ids is None:
            ids = self.vocab.encode(task.instruction_text.split())
            self._instr_cache[task.name] = ids
        return ids

    def begin_episode(self, seed: int) -> None:
        pass

    def act(self, task: Task, scene: Scene, image: np.ndarray) -> Action:
        decision = decide_action(
            self.params, self.cfg, self.vocab, image, self.instruction_ids(task)
        )
        return self.vocab.action_of_id(decision.action_token_id)

    def decide(self, task: Task, image: np.ndarray):
        return decide_action(
            self.params,
            self.cfg,
            self.vocab,
            image,
            self.instruction_ids(task),
            collect_attention=True,
        )


class ExpertPolicy:
    """The scripted expert wrapped under the policy interface; reads the symbolic scene."""

    def begin_episode(self, seed: int) -> None:
        pass

    def act(self, task: Task, scene: Scene, image: np.ndarray) -> Action:
        return expert_action(scene, task)


class RandomPolicy:
    """Uniform over the 18 actions, reseeded per episode."""

    def __init__(self, seed: int):
        self.seed = seed
        self._rng = Splitmix(seed)

    def begin_episode(self, seed: int) -> None:
        self._rng = Splitmix(derive_seed(self.seed, seed))

    def act(self, task: Task, scene: Scene, image: np.ndarray) -> Action:
        from .sim import ALL_ACTIONS

        return ALL_ACTIONS[self._rng.below(len(ALL_ACTIONS))]


def rollout(
    policy,
    task: Task,
    variant: VariantSpec,
    seed: int,
    max_steps: int | None = None,
    grid: int = 8,
) -> tuple[EpisodeResult, dict]:
    """render -> act -> step until success or budget. Deterministic per (policy, inputs)."""
    budget = max_steps if max_steps is not None else step_budget(grid, grid)
    scene = reset(task, variant, seed, grid, grid)
    initial_hash = scene_hash(scene)
    policy.begin_episode(seed)
    grasped = False
    success = False
    while scene.step_count < budget:
        image = render(scene, variant)
        action = policy.act(task, scene, image)
        scene, g_now, s_now = step(scene, action)
        grasped = grasped or g_now
        if s_now:
            success = True
            break
    result = EpisodeResult(grasped=grasped, success=success, steps_used=scene.step_count)
    log = {
        "grasped": grasped,
        "mode": variant.mode,
        "scene_hash": initial_hash,
        "seed": seed,
        "steps_used": scene.step_count,
        "success": success,
        "task": task.name,
    }
    return result, log


# ---- success tables ------------------------------------------------------------


@dataclass
class SuccessTable:
    rows: list[dict] = field(default_factory=list)  # mode, task, grasp, success
    averages: dict[str, dict] = field(default_factory=dict)

    def validate(self) -> None:
        for row in self.rows:
            if not (0.0 <= row["success"] <= row["grasp"] <= 1.0):
                raise MetricError(f"success must not exceed grasp: {row}")

    def to_csv_text(self) -> str:
        lines = ["mode,task,grasp,success"]
        for row in self.rows:
            lines.append(f"{row['mode']},{row['task']},{row['grasp']!r},{row['success']!r}")
        for mode, avg in self.averages.items():
            lines.append(f"{mode},average,{avg['grasp']!r},{avg['success']!r}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> dict:
        return {"averages": self.averages, "rows": self.rows}


def aggregate_episode_logs(logs: list[dict], modes, task_names) -> SuccessTable:
    """Pure fold from per-episode logs to the report table."""
    table = SuccessTable()
    for mode in modes:
        per_task = []
        for task_name in task_names:
            eps = [l for l in logs if l["mode"] == mode and l["task"] == task_name]
            if not eps:
                continue
            grasp = sum(l["grasped"] for l in eps) / len(eps)
            success = sum(l["success"] for l in eps) / len(eps)
            table.rows.append({"grasp": grasp, "mode": mode, "success": success, "task": task_name})
            per_task.append((grasp, success))
        if per_task:
            table.averages[mode] = {
                "grasp": sum(g for g, _ in per_task) / len(per_task),
                "success": sum(s for _, s in per_task) / len(per_task),
            }
    table.validate()
    return table


def eval_suite(policy, cfg: EvalConfig, out_dir=None) -> SuccessTable:
    """Run every task x mode x seed episode, aggregate, and write reports."""
    logs: list[dict] = []
    for mode in cfg.modes:
        for task_name in cfg.task_names():
            task = TASKS[task_name]
            for i in range(cfg.episodes_per_task):
                ep_seed = derive_seed(cfg.seed_base, "eval", mode, task_name, i)
                variant = make_variant(mode, ep_seed)
                try:
                    _, log = rollout(
                        policy, task, variant, ep_seed, max_steps=cfg.max_steps, grid=cfg.grid
                    )
                except Exception as exc:
                    raise type(exc)(
                        f"episode (mode={mode}, task={task_name}, i={i}): {exc}"
                    ) from exc
                logs.append(log)
    table = aggregate_episode_logs(logs, cfg.modes, cfg.task_names())
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "episodes.jsonl", "w") as fh:
            for log in logs:
                fh.write(json.dumps(log, sort_keys=True) + "\n")
        (out / "success_table.csv").write_text(table.to_csv_text())
        (out / "success_table.json").write_text(
            json.dumps(table.to_json(), sort_keys=True, indent=2) + "\n"
        )
        success_figure(table, out / "success_rates.png")
    return table


def success_figure(table: SuccessTable, path) -> None:
    """Grouped grasp/success bars per task, one panel per variant mode."""
    modes = list(table.averages) or sorted({r["mode"] for r in table.rows})
    fig, axes = plt.subplots(1, max(1, len(modes)), figsize=(6 * max(1, len(modes)), 4), squeeze=False)
    for ax, mode in zip(axes[0], modes):
        rows = [r for r in table.rows if r["mode"] == mode]
        labels = [r["task"] for r in rows]
        x = np.arange(len(rows))
        ax.bar(x - 0.2, [r["grasp"] for r in rows], width=0.4, label="grasp")
        ax.bar(x + 0.2, [r["success"] for r in rows], width=0.4, label="success")
        avg = table.averages.get(mode)
        if avg:
            ax.axhline(avg["success"], color="gray", linestyle="--", linewidth=1)
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
        ax.set_ylim(0, 1.05)
        ax.set_title(mode)
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---- attention alignment ---------------------------------------------------------


def relevant_patches(scene: Scene) -> set[int]:
    """Patch indices of the source object, destination object, and gripper cells."""
    cells = {
        scene.object_by_id(scene.source_id).cell,
        scene.object_by_id(scene.dest_id).cell,
        scene.gripper_cell,
    }
    return {y * scene.grid_w + x for x, y in cells}


def attention_alignment(patch_attention: np.ndarray, relevant: set[int]) -> float:
    """Mean over layers, heads, and queries of the attention mass on relevant patches.

    `patch_attention` is the renormalized (layers, heads, Q, patches) slice
    from extract_attention, so every row sums to one and the score lands in [0, 1].
    """
    if not relevant:
        raise MetricError("relevant patch set is empty")
    idx = sorted(relevant)
    if max(idx) >= patch_attention.shape[-1]:
        raise MetricError("relevant patch index outside the patch grid")
    return float(patch_attention[..., idx].sum(axis=-1).mean())


def per_layer_head_alignment(patch_attention: np.ndarray, relevant: set[int]) -> np.ndarray:
    idx = sorted(relevant)
    return patch_attention[..., idx].sum(axis=-1).mean(axis=-1)


@dataclass
class AlignmentReport:
    episodes: list[dict]
    mean_before: float
    mean_after: float
    per_layer_head_before: list[list[float]]
    per_layer_head_after: list[list[float]]

    @property
    def delta(self) -> float:
        return self.mean_after - self.mean_before

    def to_json(self) -> dict:
        return {
            "delta": self.delta,
            "episodes": self.episodes,
            "mean_after": self.mean_after,
            "mean_before": self.mean_before,
            "per_layer_head_after": self.per_layer_head_after,
            "per_layer_head_before": self.per_layer_head_before,
        }


def _episode_alignment(policy: ModelPolicy, task: Task, scene: Scene, image: np.ndarray):
    decision = policy.decide(task, image)
    patch_attn = extract_attention(decision.attention, decision.layout, "action")
    rel = relevant_patches(scene)
    return attention_alignment(patch_attn, rel), per_layer_head_alignment(patch_attn, rel)


def compare_alignment(
    policy_before: ModelPolicy, policy_after: ModelPolicy, cfg: EvalConfig
) -> AlignmentReport:
    """Paired-seed comparison of action-query attention mass on task-relevant cells.

    Both policies observe the identical initial scene of each episode; the
    pairing is verified by scene hash, so deltas carry no environment variance.
    """
    if policy_before.vocab.hash != policy_after.vocab.hash:
        raise CompatibilityError("checkpoints use different vocabularies")
    if policy_before.cfg != policy_after.cfg:
        raise CompatibilityError("checkpoints use different model configurations")

    episodes = []
    sum_lh_before = None
    sum_lh_after = None
    for mode in cfg.modes:
        for task_name in cfg.task_names():
            task = TASKS[task_name]
            for i in range(cfg.episodes_per_task):
                ep_seed = derive_seed(cfg.seed_base, "align", mode, task_name, i)
                variant = make_variant(mode, ep_seed)
                scene_b = reset(task, variant, ep_seed, cfg.grid, cfg.grid)
                scene_a = reset(task, variant, ep_seed, cfg.grid, cfg.grid)
                hash_b, hash_a = scene_hash(scene_b), scene_hash(scene_a)
                if hash_b != hash_a:
                    raise MetricError("paired episodes disagree on the initial scene")
                image = render(scene_b, variant)
                score_b, lh_b = _episode_alignment(policy_before, task, scene_b, image)
                score_a, lh_a = _episode_alignment(policy_after, task, scene_a, image)
                sum_lh_before = lh_b if sum_lh_before is None else sum_lh_before + lh_b
                sum_lh_after = lh_a if sum_lh_after is None else sum_lh_after + lh_a
                episodes.append(
                    {
                        "after": score_a,
                        "before": score_b,
                        "delta": score_a - score_b,
                        "mode": mode,
                        "scene_hash": hash_b,
                        "seed": ep_seed,
                        "task": task_name,
                    }
                )
    n = len(episodes)
    return AlignmentReport(
        episodes=episodes,
        mean_before=float(np.mean([e["before"] for e in episodes])),
        mean_after=float(np.mean([e["after"] for e in episodes])),
        per_layer_head_before=(sum_lh_before / n).tolist(),
        per_layer_head_after=(sum_lh_after / n).tolist(),
    )


# ---- artifact emission -------------------------------------------------------------


def write_ppm(image: np.ndarray, path) -> None:
    """Binary P6 at 8 bits per channel; bit-exact, no compression."""
    h, w, _ = image.shape
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P6":
        raise PlotError("not a binary PPM file")
    w, h = (int(v) for v in parts[1].split())
    pixels = np.frombuffer(parts[3], dtype=np.uint8)[: w * h * 3]
    return pixels.reshape(h, w, 3)


def emit_heatmap(image: np.ndarray, attention_row: np.ndarray, path_base) -> None:
    """Overlay per-cell attention (normalized to max 1) on the render's red channel.

    Writes <base>.ppm, a sidecar <base>.json with the raw row, and a
    matplotlib <base>.png for quick viewing.
    """
    attention_row = np.asarray(attention_row, dtype=np.float64)
    n_cells = attention_row.size
    grid = int(round(n_cells**0.5))
    if grid * grid != n_cells:
        raise MetricError(f"attention row of {n_cells} values is not a square grid")
    cell_px = image.shape[0] // grid
    if cell_px * grid != image.shape[0] or image.shape[0] != image.shape[1]:
        raise MetricError(f"image {image.shape} does not tile into {grid}x{grid} cells")

    peak = float(attention_row.max())
    overlay = attention_row / peak if peak > 0 else np.zeros_like(attention_row)
    out = np.asarray(image, dtype=np.float64).copy()
    for idx in range(n_cells):
        y, x = divmod(idx, grid)
        out[y * cell_px : (y + 1) * cell_px, x * cell_px : (x + 1) * cell_px, 0] = overlay[idx]

    base = Path(path_base)
    base.parent.mkdir(parents=True, exist_ok=True)
    write_ppm(out, base.with_suffix(".ppm"))
    base.with_suffix(".json").write_text(
        json.dumps({"attention": attention_row.tolist(), "grid": grid}, sort_keys=True) + "\n"
    )
    fig, axes = plt.subplots(1, 2, figsize=(7, 3.5))
    axes[0].imshow(image)
    axes[0].set_title("observation")
    im = axes[1].imshow(attention_row.reshape(grid, grid), cmap="hot", vmin=0.0)
    axes[1].set_title("action attention")
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(im, ax=axes[1], fraction=0.046)
    fig.tight_layout()
    fig.savefig(base.with_suffix(".png"), dpi=120)
    plt.close(fig)


def emit_curves(report: list[dict], path_base, x_key: str = "value", y_key: str = "val_success") -> None:
    """Line chart of a sweep report: <base>.svg, <base>.json (verbatim), <base>.png."""
    points = [r for r in report if r.get(y_key) is not None]
    if len(points) < 2:
        raise PlotError(f"need at least 2 plottable points, have {len(points)}")
    base = Path(path_base)
    base.parent.mkdir(parents=True, exist_ok=True)
    base.with_suffix(".json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")

    width, height = 480, 320
    left, right, top, bottom = 56, 16, 16, 48
    xs = [float(p[x_key]) for p in points]
    ys = [float(p[y_key]) for p in points]
    x_lo, x_hi = min(xs), max(xs)
    span = (x_hi - x_lo) or 1.0

    def px(x):
        return left + (x - x_lo) / span * (width - left - right)

    def py(y):
        return height - bottom - y * (height - top - bottom)

    coords = [(px(x), py(y)) for x, y in zip(xs, ys)]
    polyline = " ".join(f"{cx:.2f},{cy:.2f}" for cx, cy in coords)
    svg = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left}" y1="{py(0.0):.2f}" x2="{width - right}" y2="{py(0.0):.2f}" '
        'stroke="black" stroke-width="1"/>',
        f'<line x1="{left}" y1="{py(0.0):.2f}" x2="{left}" y2="{py(1.0):.2f}" '
        'stroke="black" stroke-width="1"/>',
        f'<polyline fill="none" stroke="#1f6fb2" stroke-width="2" points="{polyline}"/>',
    ]
    for (cx, cy), p in zip(coords, points):
        svg.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="4" fill="#1f6fb2"/>')
        svg.append(
            f'<text x="{cx:.2f}" y="{height - bottom + 18}" font-size="11" '
            f'text-anchor="middle">{p[x_key]}</text>'
        )
    for tick in (0.0, 0.5, 1.0):
        svg.append(
            f'<text x="{left - 8}" y="{py(tick) + 4:.2f}" font-size="11" '
            f'text-anchor="end">{tick:g}</text>'
        )
    svg.append(f'<text x="{(left + width - right) / 2}" y="{height - 10}" font-size="12" '
               f'text-anchor="middle">{x_key}</text>')
    svg.append("</svg>")
    base.with_suffix(".svg").write_text("\n".join(svg) + "\n")

    fig, ax = plt.subplots(figsize=(5, 3.4))
    ax.plot(xs, ys, marker="o")
    ax.set_xlabel(x_key)
    ax.set_ylabel(y_key)
    ax.set_ylim(-0.02, 1.02)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(base.with_suffix(".png"), dpi=120)
    plt.close(fig)
