import pytest

from efficientfi.synthetic_csi import DatasetConfig, gen_dataset


@pytest.fixture(scope="session")
def desk_data():
    """Small desk dataset shared across modules: 20 frames per class."""
    return gen_dataset(DatasetConfig(preset="desk", per_class=20, seed=11))


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[0].rstrip("."))):
            terminalreporter.write_line(line)
