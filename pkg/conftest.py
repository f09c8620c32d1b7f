import os
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

# replica pools are exercised explicitly; everything else runs inline
os.environ.setdefault("WASEP_WORKERS", "1")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: Monte Carlo checks that take more than a few seconds")
