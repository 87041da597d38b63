import pytest

from coasting import simulate

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")
    config.addinivalue_line("markers", "slow: long-running end-to-end test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.skipped):
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        _CRITERIA[number] = (title, status)
    elif rep.failed:
        _CRITERIA[number] = (title, "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2} {status:<4} {title}")


@pytest.fixture(scope="session")
def small_sim():
    cfg = simulate.SimConfig(seed=11, n_classes=8, n_students=120, sessions_per_class=10)
    return simulate.generate(cfg)


@pytest.fixture(scope="session")
def small_sim_dir(tmp_path_factory, small_sim):
    d = tmp_path_factory.mktemp("sim")
    simulate.write_outputs(small_sim, d)
    return d
