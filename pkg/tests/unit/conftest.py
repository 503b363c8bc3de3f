import logging
from pathlib import Path
from typing import Any

import pytest
import yaml

logging.getLogger("tests").setLevel("DEBUG")


def write_config(path: Path, /, **fields: Any) -> Path:
    path.write_text(yaml.safe_dump({"version": 1, **fields}), encoding="utf-8")
    return path


@pytest.fixture
def config_file(tmp_path):
    def inner(**fields: Any) -> Path:
        return write_config(tmp_path / "config.yml", **fields)

    return inner
