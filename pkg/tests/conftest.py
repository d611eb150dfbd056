import pytest

_RESULTS = {}


class CriterionLog:
    """Records the outcome of one acceptance criterion for the end-of-run report."""

    def __init__(self, number, title):
        self.number, self.title = number, title
        self.details = []

    def note(self, text):
        self.details.append(str(text))

    def check(self, ok, text):
        self.note(text)
        assert ok, text


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    log = CriterionLog(*marker.args)
    yield log
    rep = getattr(request.node, "rep_call", None)
    passed = rep is not None and rep.passed
    _RESULTS[log.number] = (log.title, passed, "; ".join(log.details))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, passed, details = _RESULTS[number]
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}"
        if details:
            line += f"  [{details}]"
        terminalreporter.write_line(line)
