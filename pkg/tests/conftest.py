import numpy as np
import pytest

from sbs.data import make_blobs
from sbs.trainer import SearchRunConfig, build_model, pretrain


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def blobs():
    return make_blobs(n_train=256, n_test=256, seed=0)


@pytest.fixture(scope="session")
def quick_cfg():
    return SearchRunConfig(epochs_pretrain=5, epochs_search=3, epochs_finetune=2)


@pytest.fixture(scope="session")
def pretrained(blobs, quick_cfg):
    """Small pre-trained MLP; tests must clone before mutating."""
    return pretrain(build_model(blobs, quick_cfg, (16,)), blobs, quick_cfg)


# -- acceptance reporting: one pass/fail line per criterion ----------------------

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    rep = (yield).get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "notes": []})
    entry["ok"] &= rep.passed
    entry["notes"] += [f"{item.name.removeprefix('test_')}: {v}" for k, v in item.user_properties if k == "detail"]
    if rep.failed:
        entry["notes"].append(f"{item.name.removeprefix('test_')}: FAILED")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        line = f"criterion {n:2d} {'PASS' if e['ok'] else 'FAIL'}: {e['title']}"
        if e["notes"]:
            line += " [" + "; ".join(e["notes"]) + "]"
        terminalreporter.write_line(line)
