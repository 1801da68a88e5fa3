import pytest

from ultraqueue import calibrate, synth
from ultraqueue.forest import Hyperparams

# small forests keep fixture calibration quick; the acceptance module uses the full presets
FAST_L1 = Hyperparams(20, False, "gini", "sqrt_p", 20, 20, 9)
FAST_L2 = {t: Hyperparams(20, False, "gini", "sqrt_p", 1, 2, 9) for t in ("R1", "R2", "R3", "R4")}


@pytest.fixture(scope="session")
def small_log():
    return synth.synthesize_log(synth.compact_scenario(), 30, seed=7)


@pytest.fixture(scope="session")
def small_model(small_log):
    config = calibrate.CalibrationConfig(seed=3, gmm_n_init=3, first_level=FAST_L1, second_level=FAST_L2)
    return calibrate.build_model(small_log, config)


_ACCEPTANCE_LINES = []


def record_acceptance(line: str) -> None:
    _ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
