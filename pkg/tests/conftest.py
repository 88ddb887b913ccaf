import numpy as np
import pytest
import torch


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
    yield


@pytest.fixture(scope="session")
def small_examples():
    from crysforge.datagen import generate_examples

    return generate_examples(12, seed=3)


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def acceptance(request):
    """Recorder for one acceptance criterion; a test that raises is logged as FAIL."""
    state = {}

    def record(number: int, ok: bool, detail: str) -> None:
        state["n"] = number
        ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"

    yield record
    rep = getattr(request.node, "rep_call", None)
    n = state.get("n", getattr(request.module, "CRITERIA", {}).get(request.node.name))
    if n is not None and rep is not None and rep.failed and "PASS" in ACCEPTANCE_LINES.get(n, "PASS"):
        ACCEPTANCE_LINES[n] = f"criterion {n}: FAIL  {rep.longrepr.reprcrash.message if hasattr(rep.longrepr, 'reprcrash') else 'error'}"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
