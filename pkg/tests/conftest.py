import json
from importlib import resources
from pathlib import Path

import pytest

FIXTURES = Path(resources.files("robuststop") / "fixtures")
SCHEMAS = Path(resources.files("robuststop") / "schemas")


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


def fixture_paths(name: str) -> dict:
    d = FIXTURES / name
    return {k: d / f"{k}.json" for k in ("tree", "family", "payoff")}


def validate_report(report: dict) -> None:
    """Validate the envelope and the command body against the shipped schemas."""
    jsonschema = pytest.importorskip("jsonschema")
    referencing = pytest.importorskip("referencing")
    resources_ = [
        (p.name, referencing.Resource.from_contents(json.loads(p.read_text()))) for p in SCHEMAS.glob("*.schema.json")
    ]
    registry = referencing.Registry().with_resources(resources_)

    def check(name, inst):
        schema = json.loads((SCHEMAS / f"{name}.schema.json").read_text())
        jsonschema.Draft202012Validator(schema, registry=registry).validate(inst)

    check("envelope", report)
    check(report["command"], report["report"])


_CRITERIA: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    number, text = mark.args
    entry = _CRITERIA.setdefault(number, {"text": text, "ok": True, "seconds": 0.0})
    entry["seconds"] += rep.duration
    if rep.failed or (rep.when == "setup" and rep.skipped):
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if e['ok'] else 'FAIL'}  {e['text']}  ({e['seconds']:.1f} s)")
