import pytest

pytest.register_assert_rewrite('databricks.labs.blueprint.installation')
