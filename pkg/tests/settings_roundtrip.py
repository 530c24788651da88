"""Valida serialização, carga e sobrescritas de RunConfig usando arquivos temporários."""

from __future__ import annotations

import os
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional

# Ensure the project root is in sys.path for module imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from data.errors import ConfigError  # noqa: E402
from data.run_settings import (  # noqa: E402
    RunConfig,
    apply_overrides,
    load_run_config,
    resolve_config_path,
    save_run_config,
)

_ENV_VAR = "DESKSEG_CONFIG_FILE"


@contextmanager
def _config_env(value: Optional[Path]) -> Iterator[None]:
    original_env = os.environ.get(_ENV_VAR)
    if value is None:
        os.environ.pop(_ENV_VAR, None)
    else:
        os.environ[_ENV_VAR] = str(value)
    try:
        yield
    finally:
        if original_env is None:
            os.environ.pop(_ENV_VAR, None)
        else:
            os.environ[_ENV_VAR] = original_env


def _sample() -> RunConfig:
    config = RunConfig(registry="bench/registry.json", output_dir="runs/teste", seed=7)
    config.pretrain.steps = 250
    config.pretrain.datasets = ["pseudo_a", "pseudo_target"]
    config.pretrain.weights = [1.0, 3.0]
    config.finetune.freeze = ["extractor.*"]
    config.toggles.mixup = True
    config.head.mixup.site = "hidden"
    config.sensors = {"pseudo_target": {"height": 16, "width": 256}}
    return config.validate()


def test_roundtrip() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        original = _sample()
        path = save_run_config(original, Path(tmp) / "config.json")
        restored = load_run_config(path)
        assert restored.as_dict() == original.as_dict()
        with _config_env(path):
            assert resolve_config_path() == path
            assert load_run_config().seed == 7


def test_env_pointing_to_missing_file() -> None:
    with tempfile.TemporaryDirectory() as tmp, _config_env(Path(tmp) / "nada.json"):
        try:
            resolve_config_path()
        except ConfigError:
            return
        raise AssertionError("caminho inexistente aceito")


def test_overrides() -> None:
    config = apply_overrides(
        _sample(),
        [
            "pretrain.steps=10",
            "toggles.ppt=false",
            "finetune.freeze=[]",
            "sensors.pseudo_b.width=400",
            "output_dir=runs/outro",
        ],
    )
    assert config.pretrain.steps == 10
    assert config.toggles.ppt is False
    assert config.finetune.freeze == []
    assert config.sensors["pseudo_b"] == {"width": 400}
    assert config.output_dir == "runs/outro"
    for bad in ("pretrain.nada=1", "semigual", "pretrain.steps=abc"):
        try:
            apply_overrides(_sample(), [bad])
        except ConfigError:
            continue
        raise AssertionError(f"sobrescrita aceita: {bad}")


def test_invalid_values() -> None:
    for mutate in (
        lambda c: setattr(c.pretrain, "steps", 0),
        lambda c: setattr(c.finetune, "datasets", ["pseudo_a", "pseudo_b"]),
        lambda c: setattr(c.augment, "dropout_mode", "nuvem"),
        lambda c: setattr(c.bench, "source_val_fraction", 1.0),
    ):
        config = _sample()
        mutate(config)
        try:
            config.validate()
        except ConfigError:
            continue
        raise AssertionError("configuração inválida aceita")


def run() -> None:
    for check in (test_roundtrip, test_env_pointing_to_missing_file, test_overrides, test_invalid_values):
        check()
        print(f"✓ {check.__name__}")


if __name__ == "__main__":
    run()
