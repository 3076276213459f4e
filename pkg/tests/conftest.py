import numpy as np
import pytest

from sigmetric.encoder import EncoderConfig
from sigmetric.signals import (Demographics, SignalRecord, SplitSpec, SyntheticCohortConfig,
                               generate_synthetic_cohort, split_by_patient)

TINY_ENCODER = EncoderConfig(embedding_dim=8, n_residual_blocks=2, channels_per_block=(4, 8),
                             kernel_size=3, stem_stride=2)


@pytest.fixture(scope="session")
def tiny_cohort():
    cfg = SyntheticCohortConfig(n_patients=40, d=3, sample_rate_hz=25, seed=5)
    labeled, unlabeled = generate_synthetic_cohort(cfg)
    train, valid, test = split_by_patient(labeled, SplitSpec(seed=1))
    return {"config": cfg, "labeled": labeled, "unlabeled": unlabeled,
            "train": train, "valid": valid, "test": test}


def make_record(leads, rid="r0", pid="p0", rate=10, gender="male", age=40.0):
    return SignalRecord(rid, pid, np.asarray(leads, dtype=np.float32), rate, Demographics(gender, age))


# acceptance criteria report -------------------------------------------------

ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): one numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or rep.when == "teardown" or (rep.when == "setup" and rep.passed):
        return
    number, title = mark.args
    detail = getattr(item, "acceptance_detail", "")
    status = "PASS" if rep.passed else "FAIL"
    if rep.failed and call.excinfo is not None:
        detail = (detail + "; " if detail else "") + str(call.excinfo.value).splitlines()[0][:160]
    ACCEPTANCE[number] = (status, title, rep.duration, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        status, title, seconds, detail = ACCEPTANCE[number]
        line = f"criterion {number:>2} {status}  {title} ({seconds:.1f}s)"
        terminalreporter.write_line(line + (f": {detail}" if detail else ""))
