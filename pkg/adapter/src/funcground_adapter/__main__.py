"""Run the adapter: ``python -m funcground_adapter [--config adapter.yaml]``."""

from __future__ import annotations

import argparse
import sys

from .config import load_config
from .models import StartupError
from .service import serve


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="funcground-adapter")
    parser.add_argument("--config", default=None, help="YAML config file")
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config)
        serve(config)
    except (StartupError, ValueError, OSError) as exc:
        print(f"startup failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
