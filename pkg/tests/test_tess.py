"""Behavior-specification parsing, validation, and round-tripping."""

import random

import pytest

from fiddle import corpus, tess
from fiddle.tess import (
    ConsistencyError, GlobalBp, LocalBp, SetVarAction, SpawnRow, TessSpec,
    TessSyntaxError, parse_tess, serialize_tess, validate,
)

REFERENCE = corpus.path("echo_example.tes").read_text()


def test_reference_file_structure():
    spec = parse_tess(REFERENCE)
    assert spec.start_file == "echo_client"
    assert len(spec.spawn_rows) == 2
    assert len(spec.global_bps) == 11
    row = spec.spawn_rows[0]
    assert (row.parent_vid, row.vid, row.program) == (0, 1, "echo_client")
    assert (row.checksum, row.tail) == (13142, 4)
    sixth = spec.global_bps[5]
    assert sixth.breakpoints[0] == LocalBp(2, 1, 28)
    action = SetVarAction(2, 2, "value", "1")
    assert sixth.breakpoints[1] == LocalBp(1, 2, 17, (action,))


def test_reference_triples_transcribed():
    spec = parse_tess(REFERENCE)
    triples = [tuple((bp.when, bp.vid, bp.line) for bp in gbp.breakpoints)
               for gbp in spec.global_bps]
    assert triples == [
        ((1, 1, 17),),
        ((1, 1, 28),),
        ((2, 1, 28),),
        ((2, 1, 28), (1, 2, 13)),
        ((2, 1, 28), (2, 2, 13)),
        ((2, 1, 28), (1, 2, 17)),
        ((2, 1, 28), (2, 2, 17)),
        ((1, 1, 31), (1, 2, 24)),
        ((2, 1, 31), (2, 2, 24)),
        ((1, 1, 35), (1, 2, 26)),
        ((2, 1, 35), (2, 2, 26)),
    ]


def test_empty_initial_section():
    text = """START_FILE: p
SPAWN_TABLE: { 0 0 0 0 1 p p.c 1 1 }
INITIAL: ;"""
    spec = parse_tess(text)
    assert spec.global_bps == ()


def test_bad_when_code_rejected():
    text = """START_FILE: p
SPAWN_TABLE: { 0 0 0 0 1 p p.c 1 1 }
INITIAL: [{ (3,1,17) }];"""
    with pytest.raises(ConsistencyError):
        parse_tess(text)


def test_duplicate_vid_in_global_bp_rejected():
    text = """START_FILE: p
SPAWN_TABLE: { 0 0 0 0 1 p p.c 1 1 }
INITIAL: [{ (1,1,17),(2,1,20) }];"""
    with pytest.raises(ConsistencyError):
        parse_tess(text)


def test_unknown_vid_rejected():
    text = """START_FILE: p
SPAWN_TABLE: { 0 0 0 0 1 p p.c 1 1 }
INITIAL: [{ (1,9,17) }];"""
    with pytest.raises(ConsistencyError):
        parse_tess(text)


def test_syntax_error_carries_line():
    text = "START_FILE:\n  p\nSPAWN_TABLE:\n  { 0 0 0 0 1 p p.c 1 }\nINITIAL: ;"
    with pytest.raises(TessSyntaxError) as excinfo:
        parse_tess(text)
    assert excinfo.value.line in (4, 5)


def test_non_integer_action_value_rejected():
    text = """START_FILE: p
SPAWN_TABLE: { 0 0 0 0 1 p p.c 1 1 }
INITIAL: [{ (1,1,17,[2,1,"v","x"]) }];"""
    with pytest.raises(ConsistencyError):
        parse_tess(text)


# -- serialization ---------------------------------------------------------------

def test_round_trip_reference():
    spec = parse_tess(REFERENCE)
    assert parse_tess(serialize_tess(spec)) == spec


def test_serialize_empty_initial_shape():
    spec = TessSpec("p", (SpawnRow(0, 0, 0, 0, 1, "p", "p.c", 1, 1),), ())
    text = serialize_tess(spec)
    assert text.endswith("INITIAL:\n;")
    assert parse_tess(text) == spec


def _random_spec(rng: random.Random) -> TessSpec:
    names = ["alpha", "beta", "gamma", "delta"]
    start = rng.choice(names)
    rows = [SpawnRow(0, 0, 0, 0, 1, start, f"{start}.c",
                     rng.randint(0, 99999), rng.randint(0, 9))]
    for i in range(rng.randint(0, 3)):
        vid = i + 2
        rows.append(SpawnRow(i + 1, rng.randint(1, 60), 0,
                             rng.choice([r.vid for r in rows]), vid,
                             rng.choice(names), f"src_{vid}.c",
                             rng.randint(0, 99999), rng.randint(0, 9)))
    vids = [r.vid for r in rows]
    gbps = []
    for _ in range(rng.randint(0, 6)):
        chosen = rng.sample(vids, rng.randint(1, len(vids)))
        bps = []
        for vid in chosen:
            actions = ()
            if rng.random() < 0.3:
                actions = (SetVarAction(2, rng.choice(vids),
                                        rng.choice(["value", "x", "count"]),
                                        str(rng.randint(-99, 99))),)
            bps.append(LocalBp(rng.choice([1, 2]), vid, rng.randint(1, 99), actions))
        gbps.append(GlobalBp(tuple(bps)))
    return TessSpec(start, tuple(rows), tuple(gbps))


def test_round_trip_randomized_specs():
    rng = random.Random(424242)
    for _ in range(100):
        spec = _random_spec(rng)
        text = serialize_tess(spec)
        reparsed = parse_tess(text)
        assert reparsed == spec
        # parse . serialize is a fixed point
        assert serialize_tess(reparsed) == text


# -- validation -------------------------------------------------------------------

def test_reference_file_validates_clean_against_corpus():
    spec = parse_tess(REFERENCE)
    assert validate(spec, corpus.DIR) == []


def test_breakpoint_on_blank_line_warns():
    text = """START_FILE: echo_client
SPAWN_TABLE: { 0 0 0 0 1 echo_client echo_client.c 1 1 }
INITIAL: [{ (1,1,12) }];"""
    warnings = validate(parse_tess(text), corpus.DIR)
    assert any("line 12" in w for w in warnings)


def test_unknown_action_code_warns():
    text = """START_FILE: echo_client
SPAWN_TABLE: { 0 0 0 0 1 echo_client echo_client.c 1 1 }
INITIAL: [{ (1,1,17,[7,1,"value","1"]) }];"""
    warnings = validate(parse_tess(text), corpus.DIR)
    assert any("action code 7" in w for w in warnings)


def test_premature_vid_reference_warns():
    # vid 2 is referenced before any breakpoint lets vid 1 pass the spawn line
    text = """START_FILE: echo_client
SPAWN_TABLE: {
  0 0 0 0 1 echo_client echo_client.c 1 1,
  1 16 0 1 2 echo_server echo_server.c 1 1
}
INITIAL:
  [{ (1,1,15) }],
  [{ (1,2,13) }];"""
    warnings = validate(parse_tess(text), corpus.DIR)
    assert any("before its parent" in w for w in warnings)
