"""Shared pytest wiring: one-line-per-criterion acceptance summary."""

import re

_TITLES = {
    "01": "gradient suite matches finite differences",
    "02": "forced gates reproduce skip/residual reference nets",
    "03": "arbitrary input sizes, bounded finite outputs",
    "04": "training gain over degraded baseline (>= +2 dB)",
    "05": "gated combiner outperforms max combiner",
    "06": "PSNR falls monotonically with noise level",
    "07": "metric unit truths and windowed oracle match",
    "08": "degradation noise statistics and identity path",
    "09": "seeded reruns and checkpoints are bit-identical",
    "10": "adversarial run stays finite and balanced",
}

_results = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_criterion_(\d\d)", report.nodeid)
    if m is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        word = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}.get(
            report.outcome, report.outcome.upper())
        _results[m.group(1)] = word


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_TITLES):
        terminalreporter.write_line(
            f"criterion {num}  {_TITLES[num]:<52} {_results.get(num, 'NOT RUN')}")
