import sys

from databricks.labs.blueprint.entrypoint import get_logger
from databricks.labs.blueprint.parallel import ManyError

from databricks.labs.cfmlab.errors import (
    AcceptanceError,
    ConfigError,
    DegenerateRateError,
    NumericalError,
    TransportSizeError,
)
from databricks.labs.cfmlab.runtime import main as run_main

logger = get_logger(__file__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2
EXIT_ACCEPTANCE = 3


def _one_line(err: BaseException) -> str:
    text = err.args[0] if isinstance(err, KeyError) and err.args else str(err)
    return " ".join(str(text).split())


def _report(kind: str, code: int, err: BaseException) -> int:
    print(f"cfmlab: error={kind} code={code} message={_one_line(err)}", file=sys.stderr)
    return code


def run_cli(argv: list[str]) -> int:
    """Runs one subcommand and maps failures to exit codes: 1 for configuration, 2 for numerical
    failures and 3 for failed acceptance checks."""
    try:
        run_main(*argv)
    except (ConfigError, TransportSizeError, KeyError) as err:
        return _report("config", EXIT_CONFIG, err)
    except (NumericalError, DegenerateRateError, ManyError) as err:
        return _report("numerical", EXIT_NUMERICAL, err)
    except AcceptanceError as err:
        return _report("acceptance", EXIT_ACCEPTANCE, err)
    return EXIT_OK


def main():
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
