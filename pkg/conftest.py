import sys
from pathlib import Path

# the modules live flat at the repository root
sys.path.insert(0, str(Path(__file__).resolve().parent))


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-seed search and training experiments")
