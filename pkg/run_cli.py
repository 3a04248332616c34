#!/usr/bin/env python3
"""
HIRS command line launcher.
Equivalent to `python -m src.main`; see `python run_cli.py --help` for subcommands.
"""

if __name__ == "__main__":
    from src.main import app

    app()
