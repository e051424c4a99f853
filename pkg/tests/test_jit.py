import random

import pytest
from hypothesis import given, settings, strategies as st

from neuroagent.errors import PolicyFailure, UnknownName
from neuroagent.jit import (
    EmptySelector,
    FullLibrarySelector,
    LexicalSelector,
    ModelSelector,
    SelectionRequest,
    lexical_rank,
    mentioned_names,
    parse_selection,
    render_injection,
    select_tools,
    tokenize,
)
from neuroagent.policy import ScriptedPolicy, ScriptEntry
from neuroagent.registry import CompactIndexEntry, Registry, compact_index, render_card
from neuroagent.roles import AgentRole, DecisionPoint

from conftest import make_card


def _scripted_selector(reply):
    entry = ScriptEntry(AgentRole.PROCESSING, DecisionPoint.SELECT_TOOLS, "", reply)
    return ModelSelector(ScriptedPolicy([entry]))


def test_tokenize():
    assert tokenize("Skull-strip the T1w_images!") == ["skull", "strip", "the", "t1w", "images"]


def test_skull_strip_example(library):
    index = compact_index(library.subset(["fsl_bet_t1w", "fsl_fast", "fsl_slicetimer"]))
    result = select_tools(SelectionRequest("skull strip the T1w images", index, LexicalSelector()), library)
    assert result.selected_names == ("fsl_bet_t1w",)


def test_quoted_name_is_forced():
    reg = Registry([make_card("alpha_tool", description="smooth images"), make_card("beta_tool", description="smooth images more")])
    req = SelectionRequest("please run beta_tool on everything", compact_index(reg), LexicalSelector(max_k=1))
    assert "beta_tool" in select_tools(req, reg).selected_names
    assert mentioned_names("use alpha_tool_v2", ["alpha_tool"]) == set()


def test_unknown_name_from_model_rejected(library):
    index = compact_index(library.subset(["fsl_bet_t1w", "fsl_fast"]))
    req = SelectionRequest("skull strip", index, _scripted_selector('{"selected": ["nonexistent_tool"]}'))
    with pytest.raises(UnknownName):
        select_tools(req, library)


def test_name_outside_index_rejected(library):
    # a real card that simply was not offered still counts as unknown
    index = compact_index(library.subset(["fsl_bet_t1w"]))
    req = SelectionRequest("x", index, _scripted_selector('["fsl_fast"]'))
    with pytest.raises(UnknownName):
        select_tools(req, library)


def test_index_must_resolve(library):
    index = [CompactIndexEntry("ghost_tool", "not real")]
    with pytest.raises(UnknownName):
        select_tools(SelectionRequest("x", index, LexicalSelector()), library)


def test_model_selector_failure_wrapped():
    class Broken:
        def complete(self, request):
            raise RuntimeError("boom")

    index = [CompactIndexEntry("a_tool", "a")]
    with pytest.raises(PolicyFailure):
        select_tools(SelectionRequest("x", index, ModelSelector(Broken())), Registry([make_card("a_tool")]))


def test_model_selector_accepts_reply_shapes():
    assert parse_selection('["a", "b"]') == (["a", "b"], None)
    assert parse_selection('{"selected": ["a"], "rationale": "r"}') == (["a"], "r")
    assert parse_selection("a, b\nc") == (["a", "b", "c"], None)


def test_empty_instruction_rejected():
    with pytest.raises(ValueError):
        SelectionRequest("  ", [], LexicalSelector())


def test_full_and_empty_selectors(fixture40):
    index = compact_index(fixture40)
    full = select_tools(SelectionRequest("x", index, FullLibrarySelector()), fixture40)
    assert full.selected_names == tuple(fixture40.names)
    empty = select_tools(SelectionRequest("x", index, EmptySelector()), fixture40)
    assert empty.selected_names == () and empty.injected_context == ""


def test_lexical_rank_brute_force():
    index = [
        CompactIndexEntry("e_mask", "brain mask tool"),
        CompactIndexEntry("d_seg", "tissue segmentation"),
        CompactIndexEntry("c_reg", "register brain to template"),
        CompactIndexEntry("b_none", "unrelated"),
        CompactIndexEntry("a_none", "also unrelated"),
    ]
    instruction = "register the brain mask to the template"
    # hand scores: c_reg matches register, brain, to, template = 4; e_mask matches brain, mask = 2
    assert lexical_rank(instruction, index, 2) == [("c_reg", 4), ("e_mask", 2)]
    zero = lexical_rank("nothing matches", index[3:], 5)
    assert zero == [("a_none", 0), ("b_none", 0)]
    with pytest.raises(ValueError):
        lexical_rank("x", index, 0)


def test_lexical_rank_monotone_in_repetition():
    index = [CompactIndexEntry("a", "smoothing kernel"), CompactIndexEntry("b", "unrelated")]
    ranked = dict(lexical_rank("smoothing smoothing smoothing", index, 2))
    assert ranked["a"] == 3 >= ranked["b"]


def test_render_injection_cases(fixture40):
    assert render_injection([], fixture40) == ""
    one = fixture40.names[0]
    assert render_injection([one], fixture40) == render_card(fixture40.lookup(one))
    two = render_injection(fixture40.names[:2], fixture40)
    assert len(two.encode()) < len(render_injection(fixture40.names, fixture40).encode())
    with pytest.raises(UnknownName):
        render_injection(["ghost"], fixture40)


def test_lexical_determinism(library):
    index = compact_index(library)
    req = SelectionRequest("segment tissue after skull stripping with fsl", index, LexicalSelector())
    assert select_tools(req, library) == select_tools(req, library)


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_injection_soundness_property(fixture40, data):
    names = fixture40.names
    subset = data.draw(st.lists(st.sampled_from(names), unique=True, max_size=10))
    text = render_injection(subset, fixture40)
    for n in names:
        assert (f"SCHEMA<{n}>" in text) == (n in subset)
