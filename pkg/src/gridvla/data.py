"""Demonstration generation, rationale enrichment, persistence, splits, and sampling."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .sim import (
    TASKS,
    Scene,
    Task,
    VariantSpec,
    derive_seed,
    make_variant,
    run_expert_episode,
)
from .teacher import serialize_rationale
from .vocab import Vocabulary, build_vocab

FORMAT_VERSION = 1


class DatasetVersionError(ValueError):
    pass


class DatasetFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class DatasetConsistencyError(ValueError):
    pass


class SampleSizeError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


class PartialAnnotationError(RuntimeError):
    """Some steps could not be annotated; carries the failed step indices."""

    def __init__(self, failed_indices: list[int], causes: list[str]):
        super().__init__(
            f"annotation failed for {len(failed_indices)} steps: {failed_indices[:8]}"
            + ("..." if len(failed_indices) > 8 else "")
        )
        self.failed_indices = failed_indices
        self.causes = causes


@dataclass
class StepRecord:
    task_name: str
    episode: int
    step: int
    episode_seed: int
    variant: VariantSpec
    scene: Scene
    instruction_ids: list[int]
    action_id: int
    rationale_ids: list[int] | None

    def to_json(self) -> dict:
        return {
            "action_id": self.action_id,
            "episode": self.episode,
            "episode_seed": self.episode_seed,
            "instruction_ids": self.instruction_ids,
            "rationale_ids": self.rationale_ids,
            "scene": self.scene.to_json(),
            "step": self.step,
            "task_name": self.task_name,
            "variant": self.variant.to_json(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "StepRecord":
        return cls(
            task_name=d["task_name"],
            episode=d["episode"],
            step=d["step"],
            episode_seed=d["episode_seed"],
            variant=VariantSpec.from_json(d["variant"]),
            scene=Scene.from_json(d["scene"]),
            instruction_ids=list(d["instruction_ids"]),
            action_id=d["action_id"],
            rationale_ids=None if d["rationale_ids"] is None else list(d["rationale_ids"]),
        )


@dataclass
class AnnotatedDataset:
    steps: list[StepRecord]
    generator_seed: int
    variant_mode: str

    def __len__(self) -> int:
        return len(self.steps)

    def counts_per_task(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for rec in self.steps:
            counts[rec.task_name] = counts.get(rec.task_name, 0) + 1
        return counts

    def episode_keys(self) -> list[tuple[str, int]]:
        seen: list[tuple[str, int]] = []
        prev = None
        for rec in self.steps:
            key = (rec.task_name, rec.episode)
            if key != prev:
                seen.append(key)
                prev = key
        return seen

    def manifest(self, vocab: Vocabulary) -> dict:
        return {
            "counts_per_task": self.counts_per_task(),
            "episodes": len(set(self.episode_keys())),
            "format_version": FORMAT_VERSION,
            "generator_seed": self.generator_seed,
            "steps": len(self.steps),
            "variant_mode": self.variant_mode,
            "vocab_hash": vocab.hash,
        }


def strip_rationales(dataset: AnnotatedDataset) -> AnnotatedDataset:
    steps = [replace(rec, rationale_ids=None, scene=rec.scene.copy()) for rec in dataset.steps]
    return AnnotatedDataset(steps, dataset.generator_seed, dataset.variant_mode)


def generate_demos(
    episodes_per_task: int,
    seed: int,
    vocab: Vocabulary,
    tasks: dict[str, Task] | None = None,
    variant_mode: str = "visual_matching",
    grid: int = 8,
) -> AnnotatedDataset:
    """Run the scripted expert and emit one record per timestep. Deterministic in seed."""
    if episodes_per_task < 1:
        raise GenerationError("episodes_per_task must be >= 1")
    tasks = tasks if tasks is not None else TASKS
    steps: list[StepRecord] = []
    for task_name, task in tasks.items():
        instruction_ids = vocab.encode(task.instruction_text.split())
        for episode in range(episodes_per_task):
            ep_seed = derive_seed(seed, task_name, episode)
            variant = make_variant(variant_mode, ep_seed)
            trace, result = run_expert_episode(task, variant, ep_seed, grid, grid)
            if not result.success:
                raise GenerationError(f"expert failed on {task_name} episode {episode}")
            for t, (scene, action) in enumerate(trace):
                steps.append(
                    StepRecord(
                        task_name=task_name,
                        episode=episode,
                        step=t,
                        episode_seed=ep_seed,
                        variant=variant,
                        scene=scene,
                        instruction_ids=instruction_ids,
                        action_id=vocab.action_id(action),
                        rationale_ids=None,
                    )
                )
    return AnnotatedDataset(steps, generator_seed=seed, variant_mode=variant_mode)


def augment(dataset: AnnotatedDataset, teacher, vocab: Vocabulary) -> AnnotatedDataset:
    """Attach the episode rationale to every step of its trajectory.

    The teacher runs once per episode on the initial scene; the serialized
    rationale is replicated across the episode's steps. On any failure the
    remaining episodes are still attempted and a PartialAnnotationError
    listing every failed step index is raised at the end.
    """
    episode_first: dict[tuple[str, int], int] = {}
    for i, rec in enumerate(dataset.steps):
        episode_first.setdefault((rec.task_name, rec.episode), i)

    rationale_by_episode: dict[tuple[str, int], list[int]] = {}
    failed: list[int] = []
    causes: list[str] = []
    for key, first_idx in episode_first.items():
        first = dataset.steps[first_idx]
        task = TASKS[first.task_name]
        try:
            record = teacher.annotate(first.scene, task)
            rationale_by_episode[key] = serialize_rationale(record, vocab)
        except Exception as exc:
            indices = [
                i
                for i, rec in enumerate(dataset.steps)
                if (rec.task_name, rec.episode) == key
            ]
            failed.extend(indices)
            causes.append(f"{key}: {type(exc).__name__}: {exc}")
    if failed:
        raise PartialAnnotationError(sorted(failed), causes)

    steps = [
        replace(
            rec,
            scene=rec.scene.copy(),
            rationale_ids=list(rationale_by_episode[(rec.task_name, rec.episode)]),
        )
        for rec in dataset.steps
    ]
    return AnnotatedDataset(steps, dataset.generator_seed, dataset.variant_mode)


# ---- persistence -----------------------------------------------------------


def save(dataset: AnnotatedDataset, vocab: Vocabulary, base_path: str | Path) -> None:
    """Write <base>.manifest.json, <base>.records.jsonl, and vocab.json next to them."""
    base = Path(base_path)
    base.parent.mkdir(parents=True, exist_ok=True)
    manifest = dataset.manifest(vocab)
    base.with_name(base.name + ".manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    )
    with open(base.with_name(base.name + ".records.jsonl"), "w") as fh:
        for rec in dataset.steps:
            fh.write(json.dumps(rec.to_json(), sort_keys=True, separators=(",", ":")) + "\n")
    (base.parent / "vocab.json").write_text(
        json.dumps(vocab.to_json(), sort_keys=True, indent=2) + "\n"
    )


def load(base_path: str | Path) -> tuple[AnnotatedDataset, Vocabulary]:
    base = Path(base_path)
    manifest_path = base.with_name(base.name + ".manifest.json")
    records_path = base.with_name(base.name + ".records.jsonl")
    vocab_path = base.parent / "vocab.json"
    for p in (manifest_path, records_path, vocab_path):
        if not p.exists():
            raise DatasetFormatError(f"missing dataset file {p}")

    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetVersionError(
            f"unsupported dataset format version {manifest.get('format_version')!r}"
        )
    vocab = Vocabulary.from_json(json.loads(vocab_path.read_text()))
    if manifest["vocab_hash"] != vocab.hash:
        raise DatasetConsistencyError("manifest vocab hash does not match vocab.json")

    steps: list[StepRecord] = []
    with open(records_path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                steps.append(StepRecord.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DatasetFormatError(f"malformed record ({exc})", line=line_no) from exc

    dataset = AnnotatedDataset(
        steps,
        generator_seed=manifest["generator_seed"],
        variant_mode=manifest["variant_mode"],
    )
    if manifest["steps"] != len(steps):
        raise DatasetConsistencyError(
            f"manifest says {manifest['steps']} steps, file holds {len(steps)}"
        )
    if manifest["counts_per_task"] != dataset.counts_per_task():
        raise DatasetConsistencyError("per-task counts do not match the manifest")
    return dataset, vocab


# ---- sampling and splits ----------------------------------------------------


def sample_minibatch(
    dataset: AnnotatedDataset, batch_size: int, rng: np.random.Generator
) -> list[StepRecord]:
    """Uniform without replacement within the batch; deterministic given rng state."""
    n = len(dataset.steps)
    if batch_size > n:
        raise SampleSizeError(f"batch of {batch_size} from a dataset of {n}")
    idx = rng.choice(n, size=batch_size, replace=False)
    return [dataset.steps[int(i)] for i in idx]


def split_by_episode(
    dataset: AnnotatedDataset, val_fraction: float, seed: int
) -> tuple[AnnotatedDataset, AnnotatedDataset]:
    """Hold out whole episodes per task; layouts in the two splits never overlap."""
    by_task: dict[str, list[int]] = {}
    for task_name, episode in dict.fromkeys(
        (rec.task_name, rec.episode) for rec in dataset.steps
    ):
        by_task.setdefault(task_name, []).append(episode)

    rng = np.random.default_rng(derive_seed(seed, "split") % (2**63))
    val_keys: set[tuple[str, int]] = set()
    for task_name, episodes in by_task.items():
        episodes = sorted(episodes)
        if len(episodes) < 2:
            continue
        order = rng.permutation(len(episodes))
        n_val = min(len(episodes) - 1, max(1, int(round(val_fraction * len(episodes)))))
        for j in order[:n_val]:
            val_keys.add((task_name, episodes[int(j)]))

    train_steps, val_steps = [], []
    for rec in dataset.steps:
        (val_steps if (rec.task_name, rec.episode) in val_keys else train_steps).append(rec)
    train = AnnotatedDataset(train_steps, dataset.generator_seed, dataset.variant_mode)
    val = AnnotatedDataset(val_steps, dataset.generator_seed, dataset.variant_mode)
    return train, val


def default_vocab() -> Vocabulary:
    return build_vocab()
