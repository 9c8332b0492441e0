import pytest

from qasynth.ingest import count_tokens
from qasynth.records import Segment

PASSAGE = (
    "Coronaviruses are enveloped RNA viruses that infect birds and mammals. The 2019 outbreak began in Wuhan, "
    "where early cases were linked to a seafood market. Researchers sequenced the genome within weeks and found "
    "it shared about 80 percent identity with SARS. Transmission occurs mainly through respiratory droplets "
    "produced when an infected person coughs or sneezes. The median incubation period was estimated at 5.2 days, "
    "although some patients showed symptoms after two weeks. Older adults and people with chronic conditions faced "
    "a higher risk of severe pneumonia. Public health agencies recommended hand washing, masks, and physical "
    "distancing to slow the spread. Vaccine development started immediately, using both mRNA and viral vector "
    "platforms."
)


def make_segment(text: str = PASSAGE, doc_id: str = "doc", index: int = 0) -> Segment:
    return Segment(f"{doc_id}::{index:04d}", doc_id, index, text, count_tokens(text))


@pytest.fixture
def passage() -> str:
    return PASSAGE


@pytest.fixture
def segment() -> Segment:
    return make_segment()


# Acceptance criteria report: one PASS/FAIL line per criterion.

_criteria: dict[str, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion this test checks")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    title = dict(report.user_properties).get("criterion")
    if title is not None:
        _criteria[title] = ("PASS" if report.passed else "FAIL", report.nodeid)


@pytest.fixture(autouse=True)
def _tag_criterion(request, record_property):
    marker = request.node.get_closest_marker("criterion")
    if marker is not None:
        n, title = marker.args
        record_property("criterion", f"criterion {n}: {title}")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for title in sorted(_criteria, key=lambda t: int(t.split()[1].rstrip(":"))):
        verdict, _ = _criteria[title]
        terminalreporter.write_line(f"{verdict} {title}")
