import logging

import pytest

logging.getLogger("tests").setLevel("DEBUG")
logging.getLogger("databricks.labs.cfmlab").setLevel("DEBUG")


@pytest.fixture
def threads() -> str:
    return "4"
