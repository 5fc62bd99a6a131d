import pytest

from omnicast import dataset as ds
from omnicast import model as M
from omnicast import pipeline as pl
from omnicast import simulator as sim
from tests.helpers import ACCEPTANCE_LINES


@pytest.fixture(scope="session")
def small_data():
    """Two broken-sky days after a ten-day clear warm-up, 32 px frames processed to 16 px."""
    cfg = sim.SimulationConfig(seed=11, days=["broken_sky", "broken_sky"], warmup_days=10,
                               sat_size=32, sky_size=32)
    return pl.process_days(sim.simulate(cfg), pl.PreprocessConfig(resolution=16))


@pytest.fixture(scope="session")
def small_samples(small_data):
    asm = ds.AssemblyConfig(site=small_data.site, stride=600)
    return list(ds.assemble(small_data.sky, small_data.ci, small_data.irradiance, asm))


@pytest.fixture(scope="session")
def tiny_config():
    return M.ModelConfig(input_resolution=16, encoder_widths=(4, 4, 8), latent_width=8)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
