import dataclasses

import numpy as np
import pytest

from mcrssl.config import Config, config_from_dict
from mcrssl.model import Model, ModelConfig, init_params


def small_config(**overrides) -> Config:
    """A fast configuration for unit tests; ``overrides`` use dotted keys."""
    d = Config().to_dict()
    d["model"].update(n_layers=2, d_model=16, n_heads=2, ffn_mult=2,
                      feature_encoder_spec=[[8, 10, 5], [16, 8, 4], [16, 16, 8]])
    d["masking"].update(num_views=2)
    d["train"].update(total_updates=6, batch_size=2, warmup_updates=2, save_every=0)
    d["data"]["synthetic"].update(n_clips=8, clip_len_samples=2400)
    d["probe"].update(n_clips=16, epochs=40)
    for key, value in overrides.items():
        section, name = key.split(".", 1)
        if "." in name:
            sub, leaf = name.split(".")
            d[section][sub][leaf] = value
        else:
            d[section][name] = value
    return config_from_dict(d)


@pytest.fixture
def tiny_model():
    cfg = ModelConfig(n_layers=2, d_model=16, n_heads=2, ffn_mult=2,
                      feature_encoder_spec=[[8, 10, 5], [16, 8, 4], [16, 16, 8]])
    return Model(cfg), init_params(cfg, 3)


@pytest.fixture
def rng_np():
    return np.random.default_rng(12345)


def replace_model(cfg: ModelConfig, **kw) -> ModelConfig:
    return dataclasses.replace(cfg, **kw)


# criterion number -> (title, passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {title}: {detail}")
