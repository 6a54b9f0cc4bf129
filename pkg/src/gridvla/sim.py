"""Deterministic gridworld pick-and-place simulator: scenes, stepping, rendering, scripted expert."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace

import numpy as np

CELL_PX = 4

KINDS = (
    "spoon",
    "towel",
    "carrot",
    "plate",
    "green_block",
    "yellow_block",
    "eggplant",
    "basket",
)
FLAT_KINDS = frozenset({"towel", "plate", "basket"})

PALETTE = {
    "background": (0.78, 0.72, 0.62),
    "spoon": (0.62, 0.62, 0.66),
    "towel": (0.15, 0.35, 0.85),
    "carrot": (0.95, 0.45, 0.10),
    "plate": (0.92, 0.92, 0.88),
    "green_block": (0.10, 0.75, 0.20),
    "yellow_block": (0.95, 0.85, 0.10),
    "eggplant": (0.45, 0.10, 0.55),
    "basket": (0.55, 0.35, 0.12),
}

VISUAL_MATCHING = "visual_matching"
VARIANT_AGGREGATION = "variant_aggregation"


class SceneInvariantError(ValueError):
    pass


class CapacityError(ValueError):
    pass


class TaskError(ValueError):
    pass


class VariantError(ValueError):
    pass


# ---- splitmix64 ----------------------------------------------------------

_M64 = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (next_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _M64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    z ^= z >> 31
    return state, z


class Splitmix:
    """Tiny deterministic PRNG; one instance per episode, never shared."""

    def __init__(self, seed: int):
        self._state = seed & _M64

    def next(self) -> int:
        self._state, z = splitmix64(self._state)
        return z

    def below(self, n: int) -> int:
        return self.next() % n

    def unit(self) -> float:
        return self.next() / 2.0**64


def derive_seed(seed: int, *parts) -> int:
    """Fold labels and indices into a fresh 64-bit seed."""
    s = seed & _M64
    for p in parts:
        if isinstance(p, str):
            p = int.from_bytes(hashlib.blake2s(p.encode()).digest()[:8], "big")
        _, s = splitmix64(s ^ (int(p) & _M64))
    return s


# ---- domain types --------------------------------------------------------


@dataclass(frozen=True)
class Action:
    dx: int
    dy: int
    grip: str  # "open" | "close"

    def __post_init__(self):
        if self.dx not in (-1, 0, 1) or self.dy not in (-1, 0, 1):
            raise ValueError(f"action deltas must be in {{-1,0,1}}, got ({self.dx},{self.dy})")
        if self.grip not in ("open", "close"):
            raise ValueError(f"grip must be open or close, got {self.grip!r}")

    @property
    def token(self) -> str:
        return f"ACT_{self.dx}_{self.dy}_{self.grip}"


ALL_ACTIONS = tuple(
    Action(dx, dy, grip) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for grip in ("open", "close")
)
_ACTION_INDEX = {a: i for i, a in enumerate(ALL_ACTIONS)}


def action_index(action: Action) -> int:
    return _ACTION_INDEX[action]


@dataclass(frozen=True)
class Task:
    source_kind: str
    dest_kind: str
    instruction_text: str

    def __post_init__(self):
        if self.source_kind == self.dest_kind:
            raise TaskError("source and destination kinds must differ")

    @property
    def name(self) -> str:
        return f"{self.source_kind}-on-{self.dest_kind}"


TASKS = {
    t.name: t
    for t in (
        Task("spoon", "towel", "put spoon on towel"),
        Task("carrot", "plate", "put carrot on plate"),
        Task("green_block", "yellow_block", "stack green_block on yellow_block"),
        Task("eggplant", "basket", "put eggplant in basket"),
    )
}


@dataclass(frozen=True)
class VariantSpec:
    distractor_count: int = 0
    lighting: float = 1.0
    palette_jitter_seed: int = 0
    layout_seed: int = 0
    mode: str = VISUAL_MATCHING

    def __post_init__(self):
        if self.mode not in (VISUAL_MATCHING, VARIANT_AGGREGATION):
            raise VariantError(f"unknown variant mode {self.mode!r}")
        if not 0 <= self.distractor_count <= 4:
            raise VariantError("distractor_count must be in 0..4")
        if not 0.5 <= self.lighting <= 1.5:
            raise VariantError("lighting must be in [0.5, 1.5]")
        if self.mode == VISUAL_MATCHING and (
            self.distractor_count != 0 or self.lighting != 1.0 or self.palette_jitter_seed != 0
        ):
            raise VariantError("visual_matching fixes distractors=0, lighting=1.0, no jitter")

    def to_json(self) -> dict:
        return {
            "distractor_count": self.distractor_count,
            "layout_seed": self.layout_seed,
            "lighting": self.lighting,
            "mode": self.mode,
            "palette_jitter_seed": self.palette_jitter_seed,
        }

    @classmethod
    def from_json(cls, d: dict) -> "VariantSpec":
        return cls(
            distractor_count=d["distractor_count"],
            lighting=d["lighting"],
            palette_jitter_seed=d["palette_jitter_seed"],
            layout_seed=d["layout_seed"],
            mode=d["mode"],
        )


def make_variant(mode: str, episode_seed: int) -> VariantSpec:
    """Per-episode variant: visual_matching is canonical, variant_aggregation perturbs."""
    if mode == VISUAL_MATCHING:
        return VariantSpec(layout_seed=derive_seed(episode_seed, "layout"), mode=mode)
    if mode == VARIANT_AGGREGATION:
        rng = Splitmix(derive_seed(episode_seed, "variant"))
        return VariantSpec(
            distractor_count=rng.below(5),
            lighting=0.5 + rng.unit(),
            palette_jitter_seed=derive_seed(episode_seed, "jitter"),
            layout_seed=derive_seed(episode_seed, "layout"),
            mode=mode,
        )
    raise VariantError(f"unknown variant mode {mode!r}")


@dataclass
class SceneObject:
    id: int
    kind: str
    cell: tuple[int, int]


@dataclass
class Scene:
    grid_w: int
    grid_h: int
    objects: list[SceneObject]
    gripper_cell: tuple[int, int]
    held: int | None
    step_count: int
    source_id: int
    dest_id: int

    def object_by_id(self, oid: int) -> SceneObject:
        for o in self.objects:
            if o.id == oid:
                return o
        raise TaskError(f"no object with id {oid}")

    def copy(self) -> "Scene":
        return Scene(
            grid_w=self.grid_w,
            grid_h=self.grid_h,
            objects=[replace(o) for o in self.objects],
            gripper_cell=self.gripper_cell,
            held=self.held,
            step_count=self.step_count,
            source_id=self.source_id,
            dest_id=self.dest_id,
        )

    def to_json(self) -> dict:
        return {
            "dest_id": self.dest_id,
            "grid_h": self.grid_h,
            "grid_w": self.grid_w,
            "gripper": list(self.gripper_cell),
            "held": self.held,
            "objects": [
                {"cell": list(o.cell), "id": o.id, "kind": o.kind}
                for o in sorted(self.objects, key=lambda o: o.id)
            ],
            "source_id": self.source_id,
            "step_count": self.step_count,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Scene":
        return cls(
            grid_w=d["grid_w"],
            grid_h=d["grid_h"],
            objects=[SceneObject(o["id"], o["kind"], tuple(o["cell"])) for o in d["objects"]],
            gripper_cell=tuple(d["gripper"]),
            held=d["held"],
            step_count=d["step_count"],
            source_id=d["source_id"],
            dest_id=d["dest_id"],
        )


def scene_canonical_json(scene: Scene) -> str:
    return json.dumps(scene.to_json(), sort_keys=True, separators=(",", ":"))


def scene_hash(scene: Scene) -> str:
    return hashlib.sha256(scene_canonical_json(scene).encode()).hexdigest()


def validate_scene(scene: Scene) -> None:
    """Raise SceneInvariantError if the scene breaks a structural invariant."""
    w, h = scene.grid_w, scene.grid_h
    gx, gy = scene.gripper_cell
    if not (0 <= gx < w and 0 <= gy < h):
        raise SceneInvariantError(f"gripper {scene.gripper_cell} out of bounds")
    nonflat_cells: dict[tuple[int, int], int] = {}
    for o in scene.objects:
        x, y = o.cell
        if not (0 <= x < w and 0 <= y < h):
            raise SceneInvariantError(f"object {o.id} at {o.cell} out of bounds")
        if o.kind not in FLAT_KINDS and o.id != scene.held:
            nonflat_cells[o.cell] = nonflat_cells.get(o.cell, 0) + 1
    for cell, n in nonflat_cells.items():
        if n > 1:
            raise SceneInvariantError(f"{n} non-flat objects stacked at {cell}")
    if scene.held is not None:
        if scene.object_by_id(scene.held).cell != scene.gripper_cell:
            raise SceneInvariantError("held object does not share the gripper cell")
    if scene.step_count < 0:
        raise SceneInvariantError("negative step count")


@dataclass(frozen=True)
class EpisodeResult:
    grasped: bool
    success: bool
    steps_used: int


def step_budget(grid_w: int = 8, grid_h: int = 8) -> int:
    return 4 * (grid_w + grid_h)


# ---- episode mechanics ---------------------------------------------------


def reset(task: Task, variant: VariantSpec, seed: int, grid_w: int = 8, grid_h: int = 8) -> Scene:
    """Build the deterministic initial scene for (task, variant, seed)."""
    rng = Splitmix(derive_seed(seed, variant.layout_seed, "placement"))
    n_cells = grid_w * grid_h
    distractor_pool = [k for k in KINDS if k not in (task.source_kind, task.dest_kind)]
    kinds = [task.source_kind, task.dest_kind]
    pool = list(distractor_pool)
    for _ in range(variant.distractor_count):
        kinds.append(pool.pop(rng.below(len(pool))))
    if len(kinds) + 1 > n_cells:
        raise CapacityError(
            f"{len(kinds)} objects plus gripper will not fit a {grid_w}x{grid_h} grid"
        )

    free = [(x, y) for y in range(grid_h) for x in range(grid_w)]
    objects = []
    for oid, kind in enumerate(kinds):
        cell = free.pop(rng.below(len(free)))
        objects.append(SceneObject(oid, kind, cell))
    gripper = free.pop(rng.below(len(free)))
    return Scene(
        grid_w=grid_w,
        grid_h=grid_h,
        objects=objects,
        gripper_cell=gripper,
        held=None,
        step_count=0,
        source_id=0,
        dest_id=1,
    )


def step(scene: Scene, action: Action) -> tuple[Scene, bool, bool]:
    """Apply one action: move (clamped), then resolve the grip at the new cell.

    Returns (next_scene, grasped_now, success_now). All actions are legal;
    a release onto a cell already holding a placed non-flat object is a no-op.
    """
    s = scene.copy()
    gx, gy = s.gripper_cell
    nx = min(max(gx + action.dx, 0), s.grid_w - 1)
    ny = min(max(gy + action.dy, 0), s.grid_h - 1)
    s.gripper_cell = (nx, ny)
    if s.held is not None:
        s.object_by_id(s.held).cell = (nx, ny)

    grasped_now = False
    success_now = False
    if action.grip == "close":
        if s.held is None:
            source = s.object_by_id(s.source_id)
            if source.cell == s.gripper_cell:
                s.held = s.source_id
                grasped_now = True
    else:  # open
        if s.held is not None:
            dest = s.object_by_id(s.dest_id)
            if s.gripper_cell == dest.cell:
                s.held = None
                success_now = True
            else:
                blocked = any(
                    o.cell == s.gripper_cell and o.kind not in FLAT_KINDS and o.id != s.held
                    for o in s.objects
                )
                if not blocked:
                    s.held = None
    s.step_count += 1
    return s, grasped_now, success_now


def expert_action(scene: Scene, task: Task) -> Action:
    """Greedy scripted expert: reduce |dx| first, then |dy|; grasp/release on arrival."""
    try:
        source = scene.object_by_id(scene.source_id)
        dest = scene.object_by_id(scene.dest_id)
    except TaskError as exc:
        raise TaskError(f"task objects missing from scene: {exc}") from exc
    if source.kind != task.source_kind or dest.kind != task.dest_kind:
        raise TaskError("scene objects do not match the task kinds")

    if scene.held is None:
        target = source.cell
        arrive_grip = "close"
        move_grip = "open"
    else:
        target = dest.cell
        arrive_grip = "open"
        move_grip = "close"  # keep gripping while carrying

    gx, gy = scene.gripper_cell
    dx = target[0] - gx
    dy = target[1] - gy
    if dx == 0 and dy == 0:
        return Action(0, 0, arrive_grip)
    if dx != 0:
        return Action(1 if dx > 0 else -1, 0, move_grip)
    return Action(0, 1 if dy > 0 else -1, move_grip)


def run_expert_episode(
    task: Task, variant: VariantSpec, seed: int, grid_w: int = 8, grid_h: int = 8
) -> tuple[list[tuple[Scene, Action]], EpisodeResult]:
    """Roll the scripted expert to completion; returns the (scene, action) trace."""
    scene = reset(task, variant, seed, grid_w, grid_h)
    budget = step_budget(grid_w, grid_h)
    trace = []
    grasped = False
    for _ in range(budget):
        action = expert_action(scene, task)
        trace.append((scene, action))
        scene, g_now, s_now = step(scene, action)
        grasped = grasped or g_now
        if s_now:
            return trace, EpisodeResult(grasped=grasped, success=True, steps_used=scene.step_count)
    return trace, EpisodeResult(grasped=grasped, success=False, steps_used=scene.step_count)


# ---- rendering -----------------------------------------------------------


def _jittered_palette(jitter_seed: int) -> dict[str, np.ndarray]:
    palette = {k: np.array(v, dtype=np.float64) for k, v in PALETTE.items()}
    if jitter_seed == 0:
        return palette
    rng = Splitmix(jitter_seed)
    for kind in KINDS:
        off = np.array([rng.unit() * 0.2 - 0.1 for _ in range(3)])
        palette[kind] = np.clip(palette[kind] + off, 0.0, 1.0)
    return palette


def render(scene: Scene, variant: VariantSpec) -> np.ndarray:
    """Rasterize the scene to a (4*grid_h, 4*grid_w, 3) float image in [0, 1].

    Each cell maps to one 4x4 block. Flat objects draw under non-flat ones.
    The gripper is a 1-pixel white border on its cell; while holding, the
    border's four corner pixels take the held object's color so that the
    grasped state is visible in pixels.
    """
    palette = _jittered_palette(variant.palette_jitter_seed)
    img = np.empty((scene.grid_h * CELL_PX, scene.grid_w * CELL_PX, 3), dtype=np.float64)
    img[:, :] = palette["background"]

    def block(cell):
        x, y = cell
        return img[y * CELL_PX : (y + 1) * CELL_PX, x * CELL_PX : (x + 1) * CELL_PX]

    held_id = scene.held
    for o in scene.objects:
        if o.kind in FLAT_KINDS and o.id != held_id:
            block(o.cell)[:, :] = palette[o.kind]
    for o in scene.objects:
        if o.kind not in FLAT_KINDS and o.id != held_id:
            block(o.cell)[:, :] = palette[o.kind]
    if held_id is not None:
        held = scene.object_by_id(held_id)
        block(held.cell)[:, :] = palette[held.kind]

    g = block(scene.gripper_cell)
    g[0, :] = 1.0
    g[-1, :] = 1.0
    g[:, 0] = 1.0
    g[:, -1] = 1.0
    if held_id is not None:
        color = palette[scene.object_by_id(held_id).kind]
        for cy, cx in ((0, 0), (0, CELL_PX - 1), (CELL_PX - 1, 0), (CELL_PX - 1, CELL_PX - 1)):
            g[cy, cx] = color

    np.clip(img * variant.lighting, 0.0, 1.0, out=img)
    return img
