import numpy as np
import pytest

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    failed = rep.failed
    if rep.when == "call" or failed:
        prev = _criteria.get(number, (title, True, ""))
        detail = getattr(item, "_criterion_detail", "")
        _criteria[number] = (title, prev[1] and not failed, detail or prev[2])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, ok, detail = _criteria[number]
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def detail(request):
    """Attach a short measurement string to the acceptance summary line."""
    def record(text):
        request.node._criterion_detail = text
    return record


@pytest.fixture(scope="session")
def overfit_run():
    """Tiny model fitted to one 32x32x8 synthetic patch for 2000 steps at 2x."""
    import time

    from fgin import metrics
    from fgin.data import PatchSet
    from fgin.model import ModelConfig, predict
    from fgin.synthetic import synthetic_cube
    from fgin.train import TrainConfig, train

    cube = synthetic_cube(32, 32, 8, seed=3)
    patches = PatchSet.from_pairs([cube.values], 2)
    mcfg = ModelConfig(n_bands=8, group_size=8, overlap=2, features=16, scale=2)
    tcfg = TrainConfig(max_epochs=2000, max_steps=2000, eval_every=100)
    t0 = time.perf_counter()
    store, log = train(patches, mcfg, tcfg)
    seconds = time.perf_counter() - t0
    p = patches.patches[0]
    psnr = metrics.mpsnr(predict(p.lr, store, mcfg), p.hr)
    return {"store": store, "log": log, "seconds": seconds, "psnr": psnr, "patches": patches, "mcfg": mcfg}
