# Ensure project root is on sys.path for 'src' package imports
import sys, pathlib
root = pathlib.Path(__file__).resolve().parents[1]
if str(root) not in sys.path:
    sys.path.insert(0, str(root))

import copy

import pytest

from src import audit
from src.config import config_from_dict

# Smallest configs that still exercise every block: 16x16 masks, widths /16.
_TINY = {
    "scale": "toy",
    "model": {"img_size": 16, "channel_divisor": 16, "region_style_dim": 8, "encoder_downsamples": 1,
              "mapping_layers": 2},
    "dataset": {"toy": {"resolution": 16, "n_train": 12, "n_test": 4}},
    "optim": {"batch_size": 2, "steps": 4, "checkpoint_every": 2},
    "loss": {"sd_anneal_steps": 10},
}


def _merge(base, overlay):
    out = copy.deepcopy(base)
    for k, v in overlay.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


@pytest.fixture(autouse=True)
def _fresh_audit():
    audit.reset()
    yield
    audit.reset()


@pytest.fixture
def tiny_config():
    def make(stage="manipulation", **sections):
        return config_from_dict(_merge({"stage": stage, **_TINY}, sections))
    return make
