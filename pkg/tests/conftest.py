import pytest

from verbattr.dataio import SynthConfig, synth_generate
from verbattr.schema import build_schema


@pytest.fixture(scope="session")
def schema():
    return build_schema()


@pytest.fixture(scope="session")
def small_synth(schema):
    """40 classes, 8 held out, noiseless, embeddings wide enough to be separable."""
    cfg = SynthConfig(n_classes=40, n_test_classes=8, per_class=4, feature_dim=64, emb_dim=48, seed=1)
    return synth_generate(cfg, schema)


_criteria: dict[int, tuple[str, bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    rep = (yield).get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    number, title = mark.args
    ok = _criteria.get(number, (title, True))[1]
    _criteria[number] = (title, ok and rep.passed and not rep.skipped)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, ok = _criteria[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}")
