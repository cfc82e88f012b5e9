"""Shared fixtures plus the acceptance-criteria terminal summary."""

import pytest

from fsml.synthetic import SyntheticSpec, generate

ACCEPTANCE_LINES: list[str] = []


def record_criterion(name: str, passed: bool, detail: str = "") -> None:
    status = "PASS" if passed else "FAIL"
    suffix = f" ({detail})" if detail else ""
    line = f"[{status}] {name}{suffix}"
    ACCEPTANCE_LINES.append(line)
    print(line)


@pytest.fixture(scope="session")
def acceptance_benchmark():
    """The 20-class/64-dim/200-per-class store every criterion runs against."""
    spec = SyntheticSpec(
        num_classes=20, dim=64, samples_per_class=200,
        lambda_lo=0.5, lambda_hi=5.0, seed=20240817,
    )
    store, truth = generate(spec)
    return store, truth


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
