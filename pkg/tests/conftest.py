import numpy as np
import pytest

from wscbias.biasest import StudentTable
from wscbias.covariates import prepare_design
from wscbias.synthpop import ScenarioConfig, generate_population


@pytest.fixture(scope="session")
def small_config():
    return ScenarioConfig(n_schools=600, n_trial_controls=10, n_interventions=4,
                          selection_coefficients={"academic_level": -0.3}, rng_seed=7)


@pytest.fixture(scope="session")
def small_pop(small_config):
    return generate_population(small_config)


@pytest.fixture(scope="session")
def small_design(small_pop):
    return prepare_design(small_pop)


@pytest.fixture(scope="session")
def small_table(small_pop):
    return StudentTable(small_pop.students)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria report: one PASS/FAIL line per criterion at the end of the run
_CRITERIA = []


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.failed and report.when == "setup"):
        _CRITERIA.append((props["criterion"], "PASS" if report.passed else "FAIL", props.get("detail", "")))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, detail in sorted(_CRITERIA, key=lambda c: int(c[0].split()[0])):
        terminalreporter.write_line(f"{status} criterion {name}" + (f" | {detail}" if detail else ""))
