"""Rationale generation: a deterministic oracle over simulator ground truth plus an
HTTP client for an external teacher, with prompt templating, parsing, and validation."""

from __future__ import annotations

import time
from dataclasses import dataclass

import requests

from .sim import Scene, Task
from .vocab import VocabError

SECTION_HEADERS = ("Observation", "Situation Analysis", "Spatial Reasoning", "Task Planning")
RELATIONS = ("left_of", "right_of", "above", "below", "on", "at")
PLAN_VERBS = ("move", "grasp", "release")

OBS_MARK = "<OBS>"
SIT_MARK = "<SIT>"
SPA_MARK = "<SPA>"
PLAN_MARK = "<PLAN>"
EOS_MARK = "<EOS>"
SEP_MARK = "<SEP>"


class RationaleFormatError(ValueError):
    """The teacher text does not follow the four-section layout."""


class RationaleHallucinationError(ValueError):
    """The teacher mentioned an object kind that is not in the scene."""


class RationaleConsistencyError(ValueError):
    """The teacher stated a spatial fact that contradicts the scene geometry."""


class TeacherTransportError(RuntimeError):
    """The remote endpoint could not be reached after all attempts."""


class RemoteTeacherHttpError(RuntimeError):
    def __init__(self, status: int, body: str = ""):
        super().__init__(f"remote teacher returned HTTP {status}")
        self.status = status
        self.body = body


@dataclass
class RationaleRecord:
    """Structured four-section rationale: what is seen, what the task asks,
    how source and destination relate, and the ordered action plan."""

    observation: list[tuple[str, tuple[int, int]]]
    situation: list[str]
    spatial: list[tuple[str, str, str]]
    plan: list[list[str]]


@dataclass(frozen=True)
class TeacherPrompt:
    text: str


def oracle_annotate(scene: Scene, task: Task) -> RationaleRecord:
    """Derive the rationale directly from simulator state. Deterministic."""
    try:
        source = scene.object_by_id(scene.source_id)
        dest = scene.object_by_id(scene.dest_id)
    except Exception as exc:
        raise RationaleFormatError(f"scene lacks task objects: {exc}") from exc
    if source.kind != task.source_kind or dest.kind != task.dest_kind:
        raise RationaleFormatError("scene objects do not match the task kinds")

    sx, sy = source.cell
    dx = dest.cell[0] - sx
    dy = dest.cell[1] - sy
    spatial: list[tuple[str, str, str]] = []
    if dx > 0:
        spatial.append((source.kind, "left_of", dest.kind))
    elif dx < 0:
        spatial.append((source.kind, "right_of", dest.kind))
    if dy > 0:
        spatial.append((source.kind, "above", dest.kind))
    elif dy < 0:
        spatial.append((source.kind, "below", dest.kind))
    if dx == 0 and dy == 0:
        spatial.append((source.kind, "at", dest.kind))

    return RationaleRecord(
        observation=[(source.kind, source.cell), (dest.kind, dest.cell)],
        situation=task.instruction_text.split(),
        spatial=spatial,
        plan=[
            ["move", "to", source.kind],
            ["grasp", source.kind],
            ["move", "to", dest.kind],
            ["release", source.kind],
        ],
    )


# ---- text codec (the remote-teacher surface) -------------------------------


def rationale_to_text(record: RationaleRecord) -> str:
    obs = " ; ".join(f"{kind} {x} {y}" for kind, (x, y) in record.observation)
    spa = " ; ".join(f"{a} {rel} {b}" for a, rel, b in record.spatial)
    plan = " ; ".join(" ".join(step) for step in record.plan)
    return "\n".join(
        (
            f"Observation: {obs}",
            f"Situation Analysis: {' '.join(record.situation)}",
            f"Spatial Reasoning: {spa}",
            f"Task Planning: {plan}",
        )
    )


def _split_items(body: str) -> list[list[str]]:
    items = []
    for chunk in body.split(";"):
        words = chunk.split()
        if words:
            items.append(words)
    return items


def parse_rationale_text(raw: str) -> RationaleRecord:
    """Parse the four-section text layout; raises RationaleFormatError on violations."""
    sections: dict[str, str] = {}
    for line in raw.splitlines():
        stripped = line.strip()
        if not stripped:
            continue
        for header in SECTION_HEADERS:
            if stripped.startswith(header + ":"):
                if header in sections:
                    raise RationaleFormatError(f"duplicate section {header!r}")
                sections[header] = stripped[len(header) + 1 :].strip()
                break
    missing = [h for h in SECTION_HEADERS if h not in sections]
    if missing:
        raise RationaleFormatError(f"missing sections: {', '.join(missing)}")

    observation = []
    for words in _split_items(sections["Observation"]):
        if len(words) != 3 or not (words[1].isdigit() and words[2].isdigit()):
            raise RationaleFormatError(f"observation item must be 'kind x y', got {words!r}")
        observation.append((words[0], (int(words[1]), int(words[2]))))

    spatial = []
    for words in _split_items(sections["Spatial Reasoning"]):
        if len(words) != 3:
            raise RationaleFormatError(f"spatial item must be 'kind relation kind', got {words!r}")
        if words[1] not in RELATIONS:
            raise RationaleFormatError(f"unknown relation {words[1]!r}")
        spatial.append((words[0], words[1], words[2]))

    return RationaleRecord(
        observation=observation,
        situation=sections["Situation Analysis"].split(),
        spatial=spatial,
        plan=_split_items(sections["Task Planning"]),
    )


def validate_record(record: RationaleRecord, scene: Scene) -> None:
    """Check the record against the scene: no hallucinated kinds, no geometry lies."""
    by_kind = {o.kind: o for o in scene.objects}
    for kind, cell in record.observation:
        if kind not in by_kind:
            raise RationaleHallucinationError(f"observation mentions absent kind {kind!r}")
        if by_kind[kind].cell != cell:
            raise RationaleConsistencyError(
                f"{kind} is at {by_kind[kind].cell}, not {cell}"
            )
    if not record.plan:
        raise RationaleFormatError("plan must be non-empty")
    for a, rel, b in record.spatial:
        for kind in (a, b):
            if kind not in by_kind:
                raise RationaleHallucinationError(f"spatial mentions absent kind {kind!r}")
        ax, ay = by_kind[a].cell
        bx, by_ = by_kind[b].cell
        ok = {
            "left_of": ax < bx,
            "right_of": ax > bx,
            "above": ay < by_,
            "below": ay > by_,
            "at": (ax, ay) == (bx, by_),
            "on": (ax, ay) == (bx, by_),
        }[rel]
        if not ok:
            raise RationaleConsistencyError(f"relation ({a} {rel} {b}) contradicts the scene")


def parse_and_validate(raw: str, scene: Scene, vocab) -> RationaleRecord:
    record = parse_rationale_text(raw)
    validate_record(record, scene)
    # Reject words the token codec cannot represent.
    serialize_rationale(record, vocab)
    return record


# ---- token codec (the model surface) ---------------------------------------


def serialize_rationale(record: RationaleRecord, vocab) -> list[int]:
    """Flatten a record to token ids: <OBS> .. <SIT> .. <SPA> .. <PLAN> .. <EOS>.

    Cell coordinates become single digit tokens; plan steps are joined with
    <SEP>. parse_rationale inverts this exactly on valid records.
    """
    words: list[str] = [OBS_MARK]
    for kind, (x, y) in record.observation:
        if not (0 <= x <= 9 and 0 <= y <= 9):
            raise VocabError(f"cell ({x},{y}) outside the single-digit token range")
        words += [kind, str(x), str(y)]
    words.append(SIT_MARK)
    words += record.situation
    words.append(SPA_MARK)
    for a, rel, b in record.spatial:
        words += [a, rel, b]
    words.append(PLAN_MARK)
    for i, plan_step in enumerate(record.plan):
        if i:
            words.append(SEP_MARK)
        words += plan_step
    words.append(EOS_MARK)
    return vocab.encode(words)


def parse_rationale(ids: list[int], vocab) -> RationaleRecord:
    """Invert serialize_rationale; raises RationaleFormatError on layout violations."""
    words = vocab.decode(ids)
    marks = [OBS_MARK, SIT_MARK, SPA_MARK, PLAN_MARK, EOS_MARK]
    positions = []
    for m in marks:
        if words.count(m) != 1:
            raise RationaleFormatError(f"expected exactly one {m}")
        positions.append(words.index(m))
    if positions != sorted(positions) or positions[-1] != len(words) - 1:
        raise RationaleFormatError("section markers out of order")
    o0, s0, p0, pl0, e0 = positions
    obs_words = words[o0 + 1 : s0]
    sit_words = words[s0 + 1 : p0]
    spa_words = words[p0 + 1 : pl0]
    plan_words = words[pl0 + 1 : e0]

    if len(obs_words) % 3:
        raise RationaleFormatError("observation span must be (kind, x, y) triples")
    observation = []
    for i in range(0, len(obs_words), 3):
        kind, xs, ys = obs_words[i : i + 3]
        if not (xs.isdigit() and ys.isdigit()):
            raise RationaleFormatError("observation coordinates must be digit tokens")
        observation.append((kind, (int(xs), int(ys))))

    if len(spa_words) % 3:
        raise RationaleFormatError("spatial span must be (kind, relation, kind) triples")
    spatial = []
    for i in range(0, len(spa_words), 3):
        a, rel, b = spa_words[i : i + 3]
        if rel not in RELATIONS:
            raise RationaleFormatError(f"unknown relation {rel!r}")
        spatial.append((a, rel, b))

    plan: list[list[str]] = []
    current: list[str] = []
    for w in plan_words:
        if w == SEP_MARK:
            plan.append(current)
            current = []
        else:
            current.append(w)
    if current or plan_words:
        plan.append(current)
    if any(not p for p in plan):
        raise RationaleFormatError("empty plan step")

    return RationaleRecord(
        observation=observation, situation=sit_words, spatial=spatial, plan=plan
    )


# ---- prompting and the remote client ---------------------------------------


def scene_description_text(scene: Scene) -> str:
    parts = [f"{o.kind} at {o.cell[0]} {o.cell[1]}" for o in scene.objects]
    gx, gy = scene.gripper_cell
    parts.append(f"gripper at {gx} {gy}")
    if scene.held is not None:
        parts.append(f"holding {scene.object_by_id(scene.held).kind}")
    return " ; ".join(parts)


def render_prompt(scene_description: str, instruction: str) -> TeacherPrompt:
    if not scene_description or not instruction:
        raise ValueError("scene description and instruction must be non-empty")
    text = (
        f"Instruction: {instruction}\n"
        f"Scene: {scene_description}\n"
        "Answer with one line per section, items separated by ';'.\n"
        "Observation: list each relevant object as 'kind x y'.\n"
        "Situation Analysis: restate what the instruction requires.\n"
        "Spatial Reasoning: relate the object to move and its destination as 'kind relation kind'.\n"
        "Task Planning: give the ordered gripper steps.\n"
    )
    return TeacherPrompt(text=text)


@dataclass
class RemoteTeacherConfig:
    endpoint: str
    token: str | None = None
    retries: int = 3
    timeout: float = 10.0
    backoff_base: float = 0.5
    max_concurrency: int = 4


def annotate_remote(config: RemoteTeacherConfig, prompt: TeacherPrompt) -> str:
    """POST the prompt, return the teacher text. Transport failures are retried
    with exponential backoff up to config.retries attempts; HTTP failures are not."""
    headers = {"Content-Type": "application/json"}
    if config.token:
        headers["Authorization"] = f"Bearer {config.token}"
    last_exc: Exception | None = None
    for attempt in range(config.retries):
        try:
            resp = requests.post(
                config.endpoint,
                json={"prompt": prompt.text},
                headers=headers,
                timeout=config.timeout,
            )
        except requests.RequestException as exc:
            last_exc = exc
            if attempt + 1 < config.retries:
                time.sleep(config.backoff_base * (2**attempt))
            continue
        if not 200 <= resp.status_code < 300:
            raise RemoteTeacherHttpError(resp.status_code, resp.text[:500])
        try:
            return resp.json()["text"]
        except (ValueError, KeyError) as exc:
            raise RemoteTeacherHttpError(resp.status_code, "body lacks a 'text' field") from exc
    raise TeacherTransportError(
        f"endpoint unreachable after {config.retries} attempts: {last_exc}"
    )


class OracleTeacher:
    """Default teacher: pure function of the scene, no I/O."""

    def annotate(self, scene: Scene, task: Task) -> RationaleRecord:
        return oracle_annotate(scene, task)


class RemoteTeacher:
    """Drop-in teacher backed by an HTTP endpoint; output is validated before use."""

    def __init__(self, config: RemoteTeacherConfig, vocab):
        self.config = config
        self.vocab = vocab

    def annotate(self, scene: Scene, task: Task) -> RationaleRecord:
        prompt = render_prompt(scene_description_text(scene), task.instruction_text)
        raw = annotate_remote(self.config, prompt)
        return parse_and_validate(raw, scene, self.vocab)

    def annotate_many(self, jobs: list[tuple[Scene, Task]]) -> list[RationaleRecord]:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=self.config.max_concurrency) as pool:
            return list(pool.map(lambda st: self.annotate(*st), jobs))
