#!/usr/bin/env python3
"""CLI entry point for ipod-assim."""

import sys

from ipod_assimilation.cli import main

if __name__ == "__main__":
    sys.exit(main())
