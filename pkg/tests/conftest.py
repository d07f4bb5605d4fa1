import os

# acceptance timings are single-threaded; must be set before numpy loads BLAS
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from dualalign.alignment import init_model
from dualalign.dataset import FeatureStore, build_vocab, by_split, encode_pairs, load_manifest, split_records
from dualalign.synthetic import CLASSES, make_synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    make_synthetic(out)
    return out


@pytest.fixture(scope="session")
def synth_records(synth_dir):
    return split_records(load_manifest(synth_dir / "manifest.jsonl"), seed=0)


@pytest.fixture(scope="session")
def synth_encoded(synth_records):
    vocab = build_vocab(synth_records)
    store = FeatureStore()
    return {s: encode_pairs(by_split(synth_records, s), vocab, store) for s in ("train", "val", "test")}, vocab, store


@pytest.fixture(scope="session")
def desk_run(synth_encoded):
    """The desk preset trained once on the synthetic set; shared by slow tests."""
    import time

    from dualalign.alignment import TrainConfig, fit

    data, vocab, store = synth_encoded
    model = init_model(0, vocab, d_in=32, h=64, d_v=64, d_t=64, n=32, classes=CLASSES)
    start = time.perf_counter()
    model, history = fit(model, data["train"], data["val"], TrainConfig.from_preset("desk", seed=0))
    return {"model": model, "history": history, "seconds": time.perf_counter() - start}


# -- acceptance reporting ------------------------------------------------------

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            number, title = mark.args
            entry = _criteria.setdefault(number, {"title": title, "tests": {}})
            entry["tests"][item.nodeid] = None


def pytest_runtest_logreport(report):
    for entry in _criteria.values():
        if report.nodeid in entry["tests"]:
            prev = entry["tests"][report.nodeid]
            if report.failed or (report.when == "call" and prev is None):
                entry["tests"][report.nodeid] = "failed" if report.failed else report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        outcomes = list(entry["tests"].values())
        if all(o == "passed" for o in outcomes):
            status = "PASS"
        elif any(o == "failed" for o in outcomes):
            status = "FAIL"
        else:
            status = "NOT RUN"
        terminalreporter.write_line(f"criterion {number}: {status}  {entry['title']} ({len(outcomes)} tests)")
