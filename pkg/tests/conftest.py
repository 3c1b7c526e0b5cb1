import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))  # for helpers.py


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)
