import json
import socket
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridvla.sim import TASKS, make_variant, reset
from gridvla.teacher import (
    OracleTeacher,
    RationaleConsistencyError,
    RationaleFormatError,
    RationaleHallucinationError,
    RationaleRecord,
    RemoteTeacherConfig,
    RemoteTeacherHttpError,
    TeacherTransportError,
    annotate_remote,
    oracle_annotate,
    parse_and_validate,
    parse_rationale,
    parse_rationale_text,
    rationale_to_text,
    render_prompt,
    scene_description_text,
    serialize_rationale,
)
from gridvla.vocab import VocabError, build_vocab

VOCAB = build_vocab()
SPOON_TOWEL = TASKS["spoon-on-towel"]


def fixed_scene(spoon_cell, towel_cell, seed=0):
    scene = reset(SPOON_TOWEL, make_variant("visual_matching", seed), seed)
    scene.object_by_id(scene.source_id).cell = spoon_cell
    scene.object_by_id(scene.dest_id).cell = towel_cell
    return scene


# ---- oracle -------------------------------------------------------------------


def test_oracle_spatial_relations_from_coordinates():
    scene = fixed_scene((2, 3), (5, 5))
    record = oracle_annotate(scene, SPOON_TOWEL)
    assert ("spoon", "left_of", "towel") in record.spatial
    assert ("spoon", "above", "towel") in record.spatial
    assert len(record.spatial) == 2


def test_oracle_same_column_emits_no_horizontal_relation():
    scene = fixed_scene((4, 1), (4, 6))
    record = oracle_annotate(scene, SPOON_TOWEL)
    rels = {rel for _, rel, _ in record.spatial}
    assert "left_of" not in rels and "right_of" not in rels
    assert rels == {"above"}


def test_oracle_relations_antisymmetric():
    for seed in range(50):
        scene = reset(SPOON_TOWEL, make_variant("visual_matching", seed), seed)
        record = oracle_annotate(scene, SPOON_TOWEL)
        triples = set(record.spatial)
        for a, rel, b in triples:
            if rel in ("left_of", "right_of", "above", "below"):
                assert (b, rel, a) not in triples


def test_oracle_deterministic():
    scene = fixed_scene((1, 1), (6, 2))
    assert oracle_annotate(scene, SPOON_TOWEL) == oracle_annotate(scene, SPOON_TOWEL)


def test_oracle_plan_structure():
    record = oracle_annotate(fixed_scene((1, 1), (6, 2)), SPOON_TOWEL)
    assert record.plan == [
        ["move", "to", "spoon"],
        ["grasp", "spoon"],
        ["move", "to", "towel"],
        ["release", "spoon"],
    ]


# ---- codecs -------------------------------------------------------------------


def test_serialize_empty_sections_is_five_markers():
    record = RationaleRecord(observation=[], situation=[], spatial=[], plan=[])
    ids = serialize_rationale(record, VOCAB)
    assert VOCAB.decode(ids) == ["<OBS>", "<SIT>", "<SPA>", "<PLAN>", "<EOS>"]


def test_serialize_fixed_section_order():
    record = oracle_annotate(fixed_scene((2, 3), (5, 5)), SPOON_TOWEL)
    words = VOCAB.decode(serialize_rationale(record, VOCAB))
    markers = [w for w in words if w in ("<OBS>", "<SIT>", "<SPA>", "<PLAN>", "<EOS>")]
    assert markers == ["<OBS>", "<SIT>", "<SPA>", "<PLAN>", "<EOS>"]


def test_token_round_trip_on_500_oracle_records():
    count = 0
    for seed in range(125):
        for task in TASKS.values():
            scene = reset(task, make_variant("variant_aggregation", seed), seed)
            record = oracle_annotate(scene, task)
            ids = serialize_rationale(record, VOCAB)
            assert parse_rationale(ids, VOCAB) == record
            count += 1
    assert count == 500


def test_text_round_trip_on_oracle_records():
    for seed in range(50):
        scene = reset(SPOON_TOWEL, make_variant("visual_matching", seed), seed)
        record = oracle_annotate(scene, SPOON_TOWEL)
        assert parse_rationale_text(rationale_to_text(record)) == record


@settings(max_examples=50, deadline=None)
@given(
    spoon=st.tuples(st.integers(0, 7), st.integers(0, 7)),
    towel=st.tuples(st.integers(0, 7), st.integers(0, 7)),
)
def test_round_trip_any_geometry(spoon, towel):
    scene = fixed_scene(spoon, towel)
    record = oracle_annotate(scene, SPOON_TOWEL)
    assert parse_rationale(serialize_rationale(record, VOCAB), VOCAB) == record
    assert parse_rationale_text(rationale_to_text(record)) == record


def test_serialize_rejects_out_of_vocab_word():
    record = RationaleRecord(
        observation=[], situation=["banana"], spatial=[], plan=[["move"]]
    )
    with pytest.raises(VocabError):
        serialize_rationale(record, VOCAB)


# ---- prompt -------------------------------------------------------------------


def test_prompt_contains_each_header_once_and_instruction():
    prompt = render_prompt("spoon at 1 2", "put spoon on towel")
    for header in ("Observation", "Situation Analysis", "Spatial Reasoning", "Task Planning"):
        assert prompt.text.count(header) == 1
    assert "put spoon on towel" in prompt.text


def test_prompt_deterministic():
    a = render_prompt("x at 0 0", "put spoon on towel")
    b = render_prompt("x at 0 0", "put spoon on towel")
    assert a.text == b.text


def test_prompt_rejects_empty_inputs():
    with pytest.raises(ValueError):
        render_prompt("", "do something")


# ---- validation against the scene ------------------------------------------------


MALFORMED_CORPUS = [
    # (raw text builder, expected error type)
    ("missing_plan", RationaleFormatError),
    ("missing_observation", RationaleFormatError),
    ("duplicate_section", RationaleFormatError),
    ("bad_observation_item", RationaleFormatError),
    ("unknown_relation", RationaleFormatError),
    ("empty_plan", RationaleFormatError),
    ("hallucinated_kind_observation", RationaleHallucinationError),
    ("hallucinated_kind_spatial", RationaleHallucinationError),
    ("wrong_cell", RationaleConsistencyError),
    ("contradicted_relation", RationaleConsistencyError),
]


def _malformed_text(kind: str, scene) -> str:
    record = oracle_annotate(scene, SPOON_TOWEL)
    text = rationale_to_text(record)
    lines = text.splitlines()
    if kind == "missing_plan":
        return "\n".join(lines[:3])
    if kind == "missing_observation":
        return "\n".join(lines[1:])
    if kind == "duplicate_section":
        return text + "\n" + lines[0]
    if kind == "bad_observation_item":
        return text.replace(lines[0], "Observation: spoon near towel somewhere")
    if kind == "unknown_relation":
        return "\n".join(
            ["Spatial Reasoning: spoon inside towel" if l.startswith("Spatial") else l for l in lines]
        )
    if kind == "empty_plan":
        return "\n".join(
            ["Task Planning:" if l.startswith("Task Planning") else l for l in lines]
        )
    if kind == "hallucinated_kind_observation":
        return text.replace("Observation: spoon", "Observation: banana")
    if kind == "hallucinated_kind_spatial":
        return "\n".join(
            ["Spatial Reasoning: banana left_of towel" if l.startswith("Spatial") else l for l in lines]
        )
    if kind == "wrong_cell":
        sx, sy = scene.object_by_id(scene.source_id).cell
        wrong = f"{(sx + 1) % 8} {sy}"
        return text.replace(f"spoon {sx} {sy}", f"spoon {wrong}", 1)
    if kind == "contradicted_relation":
        flipped = {"left_of": "right_of", "right_of": "left_of", "above": "below", "below": "above"}
        for l in lines:
            if l.startswith("Spatial Reasoning:") and l.split(":", 1)[1].strip():
                first = l.split(":", 1)[1].split(";")[0].split()
                bad = f"Spatial Reasoning: {first[0]} {flipped[first[1]]} {first[2]}"
                return "\n".join(bad if x.startswith("Spatial") else x for x in lines)
        raise AssertionError("scene had no spatial relations to contradict")
    raise AssertionError(kind)


@pytest.mark.parametrize("kind,expected", MALFORMED_CORPUS)
def test_malformed_responses_rejected_with_typed_errors(kind, expected):
    scene = fixed_scene((2, 3), (5, 5))
    raw = _malformed_text(kind, scene)
    with pytest.raises(expected):
        parse_and_validate(raw, scene, VOCAB)


def test_oracle_text_passes_validation():
    scene = fixed_scene((2, 3), (5, 5))
    record = oracle_annotate(scene, SPOON_TOWEL)
    parsed = parse_and_validate(rationale_to_text(record), scene, VOCAB)
    assert parsed == record


def test_oracle_soundness_over_many_scenes():
    for seed in range(125):
        for task in TASKS.values():
            scene = reset(task, make_variant("variant_aggregation", seed), seed)
            record = oracle_annotate(scene, task)
            assert parse_and_validate(rationale_to_text(record), scene, VOCAB) == record


# ---- remote client ----------------------------------------------------------------


class _StubHandler(BaseHTTPRequestHandler):
    fail_first = 0
    response_text = "hello"
    status = 200
    calls = 0

    def do_POST(self):
        cls = type(self)
        cls.calls += 1
        length = int(self.headers.get("Content-Length", 0))
        self.rfile.read(length)
        if cls.calls <= cls.fail_first:
            # drop the connection without any HTTP response
            self.connection.close()
            return
        body = json.dumps({"text": cls.response_text}).encode()
        self.send_response(cls.status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


@pytest.fixture
def stub_server():
    class Handler(_StubHandler):
        fail_first = 0
        calls = 0
        response_text = "hello"
        status = 200

    server = HTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield Handler, f"http://127.0.0.1:{server.server_port}/annotate"
    server.shutdown()
    thread.join(timeout=5)


def _free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_remote_returns_stub_text(stub_server):
    handler, url = stub_server
    cfg = RemoteTeacherConfig(endpoint=url, retries=3, timeout=5, backoff_base=0.01)
    prompt = render_prompt("spoon at 0 0", "put spoon on towel")
    assert annotate_remote(cfg, prompt) == "hello"
    assert handler.calls == 1


def test_remote_retries_then_succeeds(stub_server):
    handler, url = stub_server
    handler.fail_first = 2
    cfg = RemoteTeacherConfig(endpoint=url, retries=3, timeout=5, backoff_base=0.01)
    prompt = render_prompt("spoon at 0 0", "put spoon on towel")
    assert annotate_remote(cfg, prompt) == "hello"
    assert handler.calls == 3


def test_remote_exhausts_retries_with_transport_error():
    url = f"http://127.0.0.1:{_free_port()}/annotate"
    cfg = RemoteTeacherConfig(endpoint=url, retries=3, timeout=2, backoff_base=0.01)
    prompt = render_prompt("spoon at 0 0", "put spoon on towel")
    with pytest.raises(TeacherTransportError, match="3 attempts"):
        annotate_remote(cfg, prompt)


def test_remote_http_error_carries_status(stub_server):
    handler, url = stub_server
    handler.status = 503
    cfg = RemoteTeacherConfig(endpoint=url, retries=2, timeout=5, backoff_base=0.01)
    prompt = render_prompt("spoon at 0 0", "put spoon on towel")
    with pytest.raises(RemoteTeacherHttpError) as err:
        annotate_remote(cfg, prompt)
    assert err.value.status == 503


def test_oracle_teacher_adapter_matches_function():
    scene = fixed_scene((1, 2), (3, 4))
    assert OracleTeacher().annotate(scene, SPOON_TOWEL) == oracle_annotate(scene, SPOON_TOWEL)


def test_scene_description_mentions_objects_and_gripper():
    scene = fixed_scene((1, 2), (3, 4))
    text = scene_description_text(scene)
    assert "spoon at 1 2" in text and "towel at 3 4" in text and "gripper at" in text
