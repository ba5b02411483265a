"""Shared record builders and the acceptance-summary terminal hook."""

from __future__ import annotations

import pytest

from daval.dataset import DeviceOutput, Label, Survival, ValidationRecord


def pytest_configure(config):
    config._acceptance_lines = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(lines):
        terminalreporter.write_line(lines[number])


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Mutable criterion-number -> summary-line mapping shown after the run."""
    return request.config._acceptance_lines


def binary_record(subject_id, truth, label, site_id="site-1", **kwargs):
    return ValidationRecord(
        subject_id=subject_id,
        site_id=site_id,
        output=DeviceOutput.binary(label),
        truth=truth,
        **kwargs,
    )


def score_record(subject_id, value, truth=None, site_id="site-1", **kwargs):
    return ValidationRecord(
        subject_id=subject_id,
        site_id=site_id,
        output=DeviceOutput.score(value),
        truth=truth,
        **kwargs,
    )


def ungradable_record(subject_id, truth, site_id="site-1", **kwargs):
    return ValidationRecord(
        subject_id=subject_id,
        site_id=site_id,
        output=DeviceOutput.ungradable(),
        truth=truth,
        **kwargs,
    )


def survival_record(subject_id, time, event, value=0.5, site_id="site-1", **kwargs):
    return ValidationRecord(
        subject_id=subject_id,
        site_id=site_id,
        output=DeviceOutput.score(value),
        survival=Survival(time=time, event=event),
        **kwargs,
    )


def triage_records(a, b, c, d, e, f):
    """Records realizing a 3x2 triage table with the given cell counts."""
    records = []
    specs = [
        (a, Label.POSITIVE, "binary", Label.POSITIVE),
        (b, Label.POSITIVE, "binary", Label.NEGATIVE),
        (c, Label.POSITIVE, "ungradable", None),
        (d, Label.NEGATIVE, "binary", Label.POSITIVE),
        (e, Label.NEGATIVE, "binary", Label.NEGATIVE),
        (f, Label.NEGATIVE, "ungradable", None),
    ]
    i = 0
    for count, truth, kind, label in specs:
        for _ in range(count):
            if kind == "binary":
                records.append(binary_record(f"s{i:04d}", truth, label))
            else:
                records.append(ungradable_record(f"s{i:04d}", truth))
            i += 1
    return records
