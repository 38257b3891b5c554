import sys
from pathlib import Path

import pytest

sys.path.append(Path(__file__).parent.as_posix())
