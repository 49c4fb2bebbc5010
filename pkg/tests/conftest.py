import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """12 classes (6/3/3), 4 scenes each; shared read-only across tests."""
    from osld.datasets import SyntheticConfig, generate_synthetic

    root = tmp_path_factory.mktemp("tiny")
    cfg = SyntheticConfig(train_classes=6, val_classes=3, test_classes=3, instances_per_class=4)
    manifest = generate_synthetic(cfg, root)
    return root, manifest


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion for the end-of-run summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number: int, passed: bool, detail: str, seconds: float, limit: float | None = None):
        timing = f"{seconds:.1f}s" + (f" (limit {limit:.0f}s)" if limit is not None else "")
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}  [{timing}]"
        lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
