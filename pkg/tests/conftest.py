from pathlib import Path

import pytest

from lidoscore.records import PersonRecord

DATA = Path(__file__).resolve().parents[1] / "src" / "lidoscore" / "data"


def rec(**kw) -> PersonRecord:
    base = dict(record_id="1", year=1950, age=40, sex="male", race="white", state="NY",
                region="northeast", occupation="100", industry="1", earnings=1000.0)
    base.update(kw)
    return PersonRecord(**base)


@pytest.fixture
def data_dir() -> Path:
    return DATA


# acceptance report: one line per criterion ---------------------------------

_ACCEPTANCE: dict[str, list] = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    entry = _ACCEPTANCE.setdefault(props["criterion"], [props.get("title", ""), True, ""])
    if report.failed:
        entry[1] = False
    if report.when == "call":
        entry[2] = props.get("detail", "")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE, key=int):
        title, ok, detail = _ACCEPTANCE[key]
        line = f"criterion {key:>2}: {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
