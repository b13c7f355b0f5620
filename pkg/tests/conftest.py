import numpy as np
import pytest

from dbsn.network import CellSpec, NetworkSpec


def tiny_spec(input_dim=2, num_classes=2, num_nodes=3, width=4, num_cells=2, ops=None):
    cell = CellSpec(num_nodes=num_nodes, node_width=width) if ops is None else CellSpec(num_nodes, tuple(ops), width)
    return NetworkSpec(input_dim, num_classes, num_cells=num_cells, cell=cell)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance report: one line per criterion -----------------------------------------

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and rep.passed):
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = "PASS" if rep.passed else "FAIL"
    if rep.skipped:
        status = "SKIP"
    item.config.stash[_RESULTS][number] = (status, title, detail)


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        status, title, detail = results[number]
        line = f"criterion {number:2d} {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
