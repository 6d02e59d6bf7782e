import random

import pytest

from xmrank.dataset_io import InteractionTable, build_index


def random_index(seed: int, n_users: int = 10, n_items: int = 10, density: float = 0.3):
    rng = random.Random(seed)
    rows = []
    for u in range(n_users):
        for i in range(n_items):
            if rng.random() < density:
                rows.append((f"u{u}", f"i{i}", float(rng.randint(1, 5))))
    if not rows:
        rows.append(("u0", "i0", 3.0))
    rng.shuffle(rows)
    return build_index(InteractionTable.from_rows(rows))[1]


@pytest.fixture
def toy_index():
    rows = [("u1", "a", 5), ("u1", "b", 3), ("u2", "a", 4), ("u2", "b", 1), ("u3", "a", 2)]
    return build_index(InteractionTable.from_rows(rows))[1]


# ------------------------------------------------------------ acceptance summary

_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not marker.args:
        return
    number, title = marker.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        detail = dict(rep.user_properties).get("detail", "")
        if rep.outcome == "skipped" and isinstance(rep.longrepr, tuple):
            detail = rep.longrepr[2]
        if status == "PASS" and dict(rep.user_properties).get("warn"):
            status = "WARN"
        _ACCEPTANCE[number] = (title, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, status, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number} {title}: {status}" + (f" ({detail})" if detail else ""))
