#!/usr/bin/env python3
"""Finite-difference audit of every layer and both desk models; exits 2 on any failure."""

import sys

from sespp.cli import main

if __name__ == "__main__":
    sys.exit(main(["gradcheck", *sys.argv[1:]]))
