import sys
import time
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

CRITERIA = {
    1: "EIC failure mode on the 3-link plant",
    2: "PEIC success on the 3-link plant",
    3: "NEIC success and alpha monotonicity",
    4: "Furuta degeneracy of EIC/PEIC/NEIC",
    5: "Furuta tracking and disturbance recovery",
    6: "GP suite",
    7: "numerics suite",
    8: "BEM oracle",
}

_results: dict[int, list[tuple[str, str, str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, part): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and rep.passed):
        return
    if rep.when == "call" or rep.failed or rep.skipped:
        number, part = marker.args
        if hasattr(rep, "wasxfail"):
            status = "FAIL"
        elif rep.failed and "XPASS(strict)" in str(rep.longrepr):
            status = "XPASS"  # the criterion now holds although marked structurally unattainable
        else:
            status = "PASS" if rep.passed else "FAIL"
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        _results.setdefault(number, []).append((part, status, detail))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(CRITERIA):
        parts = _results.get(number)
        if not parts:
            continue
        ok = all(status == "PASS" for _, status, _ in parts)
        tr.write_line(f"{'PASS' if ok else 'FAIL'}  {number}. {CRITERIA[number]}")
        for part, status, detail in parts:
            tr.write_line(f"        [{status}] {part}: {detail}")


# --- shared pipeline artifacts -------------------------------------------------------------


class Timed:
    def __init__(self, value, seconds):
        self.value, self.seconds = value, seconds


@pytest.fixture(scope="session")
def furuta_cfg():
    from gpbalance.config import load_scenario

    return load_scenario("furuta_tracking")


@pytest.fixture(scope="session")
def furuta_data(furuta_cfg):
    from gpbalance import pipelines as pl

    return pl.collect(furuta_cfg)


@pytest.fixture(scope="session")
def furuta_gp(furuta_cfg, furuta_data):
    from gpbalance import pipelines as pl

    return pl.train(furuta_cfg, furuta_data)


@pytest.fixture(scope="session")
def furuta_episodes(furuta_cfg, furuta_gp):
    """EIC, PEIC and NEIC episodes of the Furuta scenario with the max torque difference."""
    from gpbalance import pipelines as pl

    return pl.torque_agreement(furuta_cfg, furuta_gp)


@pytest.fixture(scope="session")
def three_gp_timed():
    """3-link GP (all three 3-link scenarios share plant, nominal and excitation)."""
    from gpbalance import pipelines as pl
    from gpbalance.config import load_scenario

    start = time.perf_counter()
    cfg = load_scenario("three_link_eic_failure")
    gp = pl.train(cfg, pl.collect(cfg))
    return Timed(gp, time.perf_counter() - start)


@pytest.fixture(scope="session")
def three_gp(three_gp_timed):
    return three_gp_timed.value
