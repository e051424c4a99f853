import json
import random
from pathlib import Path

import pytest

from neuroagent.registry import Family, PrimitiveCard, Registry, default_library

FIXTURES = Path(__file__).parent / "fixtures"


def make_card(name, family=Family.PROCESSING, description=None, schema=None):
    return PrimitiveCard(
        name=name,
        module=f"tool_lib.{family.value.lower()}",
        description=description or f"{name.replace('_', ' ')} operation",
        detailed_schema=schema or f"SCHEMA<{name}>\nparams: input_path (str), output_dir (str)\nreturns: dict",
        family=family,
    )


def forty_cards():
    """40 synthetic cards across the three families, each with a unique schema marker."""
    words = ["skull", "strip", "segment", "register", "smooth", "filter", "motion", "slice", "warp", "mask",
             "tissue", "bias", "normalize", "template", "volume", "graph", "network", "matrix", "quality", "mosaic"]
    rng = random.Random(40)
    fams = [Family.PROCESSING] * 24 + [Family.QC] * 10 + [Family.ANALYSIS] * 6
    cards = []
    for i, fam in enumerate(fams):
        a, b = rng.sample(words, 2)
        cards.append(make_card(f"tool_{i:02d}_{a}_{b}", fam, f"{a} and {b} for neuroimaging data"))
    return Registry(cards)


@pytest.fixture(scope="session")
def library():
    return default_library()


@pytest.fixture(scope="session")
def fixture40():
    return forty_cards()


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2), encoding="utf-8")
    return path


def pytest_terminal_summary(terminalreporter):
    module = __import__("sys").modules.get("test_acceptance")
    if not module or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(module.RESULTS):
        terminalreporter.write_line(module.RESULTS[number])
