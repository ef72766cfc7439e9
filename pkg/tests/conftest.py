import pytest

CRITERIA = {
    1: "round-trip integrity across engines",
    2: "consistency barrier is load-bearing",
    3: "effective throughput order LAZY >= 3x TWO_PHASE >= 1.5x SYNC",
    4: "end-to-end LAZY <= SYNC / 1.3",
    5: "ZeRO-1 optimizer bytes scale exactly 1/dp",
    6: "serialization bypass",
    7: "flush/stage overlap timeline",
    8: "staging cache boundedness and liveness",
    9: "format robustness under injected faults",
    10: "microbench shape",
}

_results: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not marker.args:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        measured = "; ".join(str(v) for k, v in item.user_properties if k == "measured")
        _results[marker.args[0]] = ("PASS" if rep.passed else "FAIL", measured)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(CRITERIA):
        if n not in _results:
            continue
        status, measured = _results[n]
        line = f"criterion {n:2d} {status}  {CRITERIA[n]}"
        terminalreporter.write_line(line + (f"  [{measured}]" if measured else ""))
