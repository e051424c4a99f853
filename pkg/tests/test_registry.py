import json

import pytest
from hypothesis import given, strategies as st

from neuroagent.errors import DuplicateName, EmptySchema, InvalidName, MissingField, NotFound, ParseError
from neuroagent.registry import (
    Family,
    Registry,
    compact_index,
    default_library,
    list_by_family,
    load_directory,
    load_registry,
    render_card,
    render_index,
    validate_card,
    write_card,
)

from conftest import make_card, write_json

RAW = {
    "name": "afni_normalize_t1w_to_mni",
    "module": "tool_lib.afni",
    "description": "Normalize a skull-stripped T1w image to MNI space with AFNI.",
    "detailed_schema": "Args: input_image (str), output_dir (str)\nReturns: dict with normalized image path",
    "family": "Processing",
}


def test_validate_card_accepts_example():
    card = validate_card(RAW)
    assert card.name == "afni_normalize_t1w_to_mni"
    assert card.family is Family.PROCESSING
    assert card.command_template is None


def test_validate_card_missing_schema():
    raw = {k: v for k, v in RAW.items() if k != "detailed_schema"}
    with pytest.raises(EmptySchema):
        validate_card(raw)
    with pytest.raises(EmptySchema):
        validate_card({**RAW, "detailed_schema": "   "})


def test_validate_card_bad_name():
    with pytest.raises(InvalidName):
        validate_card({**RAW, "name": "Afni Norm!"})


@pytest.mark.parametrize("key", ["name", "module", "description"])
def test_validate_card_missing_field(key):
    raw = {k: v for k, v in RAW.items() if k != key}
    with pytest.raises(MissingField) as exc:
        validate_card(raw)
    assert exc.value.field == key


def test_family_from_directory_and_extras(tmp_path):
    raw = {k: v for k, v in RAW.items() if k != "family"}
    raw["version"] = 2
    path = write_json(tmp_path / "cards" / "qc" / "x.json", raw)
    reg = load_registry([path])
    card = reg.lookup(RAW["name"])
    assert card.family is Family.QC
    assert card.extra == {"version": 2}
    assert card.to_record()["version"] == 2


def test_family_required_somewhere():
    raw = {k: v for k, v in RAW.items() if k != "family"}
    with pytest.raises(MissingField):
        validate_card(raw)


def test_validate_idempotent():
    card = validate_card(RAW)
    assert validate_card(card) == card
    assert validate_card(card.to_record()) == card


def test_load_registry_counts_and_order(tmp_path):
    paths = [write_card(make_card(n), tmp_path) for n in ("c_tool", "a_tool", "b_tool")]
    reg = load_registry(paths)
    assert len(reg) == 3
    assert reg.names == ["a_tool", "b_tool", "c_tool"]
    assert len(load_registry([])) == 0


def test_load_registry_duplicate(tmp_path):
    a = write_json(tmp_path / "processing" / "one.json", make_card("fsl_bet_t1w").to_record())
    b = write_json(tmp_path / "processing" / "two.json", make_card("fsl_bet_t1w").to_record())
    with pytest.raises(DuplicateName):
        load_registry([a, b])


def test_load_registry_parse_error(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    with pytest.raises(ParseError):
        load_registry([bad])
    arr = tmp_path / "arr.json"
    arr.write_text("[]", encoding="utf-8")
    with pytest.raises(ParseError):
        load_registry([arr])


def test_lookup_not_found():
    with pytest.raises(NotFound):
        Registry([make_card("a")]).lookup("b")


def test_compact_index_is_schema_free(fixture40):
    index = compact_index(fixture40)
    assert [e.name for e in index] == fixture40.names
    rendered = render_index(index)
    assert "SCHEMA<" not in rendered
    full = "".join(render_card(c) for c in fixture40)
    assert len(rendered.encode()) < len(full.encode())
    assert compact_index(Registry()) == []


def test_list_by_family_partition(fixture40):
    parts = [list_by_family(fixture40, f) for f in Family]
    assert sum(len(p) for p in parts) == len(fixture40)
    names = [c.name for p in parts for c in p]
    assert sorted(names) == fixture40.names
    reg = Registry([make_card("p1"), make_card("p2"), make_card("q1", Family.QC)])
    assert [c.name for c in list_by_family(reg, "Processing")] == ["p1", "p2"]
    assert list_by_family(Registry([make_card("p1")]), Family.ANALYSIS) == []


def test_shipped_library():
    reg = default_library()
    assert len(reg) == 41
    counts = {f: len(list_by_family(reg, f)) for f in Family}
    assert counts == {Family.PROCESSING: 28, Family.QC: 9, Family.ANALYSIS: 4}
    for card in reg:
        assert card.detailed_schema.strip()


def test_load_directory_round_trip(tmp_path, library):
    for card in library:
        write_card(card, tmp_path)
    again = load_directory(tmp_path)
    assert again.names == library.names
    assert all(again.lookup(n) == library.lookup(n) for n in library.names)


names = st.lists(st.from_regex(r"[a-z0-9_]{1,12}", fullmatch=True), unique=True, max_size=15)


@given(names)
def test_index_names_match_registry(ns):
    reg = Registry([make_card(n) for n in ns])
    assert sorted(e.name for e in compact_index(reg)) == sorted(ns)
    assert reg.names == sorted(ns)
