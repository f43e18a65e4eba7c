import hashlib
from pathlib import Path

import pytest
from hypothesis import settings

import occsafe
from occsafe.config import ExperimentConfig, ScenarioConfig
from occsafe.risk import build_risk_table, policy_fingerprint, save_table

from helpers import ACCEPTANCE_LINES

settings.register_profile("occsafe", deadline=None, max_examples=60)
settings.load_profile("occsafe")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def scenario():
    return ScenarioConfig()


@pytest.fixture
def experiment():
    return ExperimentConfig()


def _source_digest() -> str:
    h = hashlib.sha256()
    for f in sorted(Path(occsafe.__file__).parent.glob("*.py")):
        h.update(f.read_bytes())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def default_table_path(request) -> Path:
    """The default-grid table at the configured N, cached across sessions by source digest."""
    cfg = ExperimentConfig()
    key = f"{policy_fingerprint(cfg.scenario, cfg.risk)[:12]}-{cfg.risk.n_trials}-{cfg.seed}-{_source_digest()}"
    path = Path(request.config.cache.mkdir("occsafe-tables")) / f"{key}.json"
    if not path.exists():
        table = build_risk_table(cfg.scenario, cfg.risk.grid, cfg.risk.n_trials, cfg.risk.horizon, cfg.seed, cfg.risk)
        save_table(table, path)
    return path
