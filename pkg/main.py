#!/usr/bin/env python3
"""
Main Application Entry Point
Semantics-aware photo stylization

Commands:
- gen: synthetic style datasets with planted color transforms
- train: end-to-end training of the per-pixel transform network
- apply: stylize a PNG with a trained checkpoint
- eval: mean per-pixel L2 report against ground truth
- selfcheck: fast gradient, oracle and color-math checks
"""
import sys

from app.cli import main

if __name__ == "__main__":
    sys.exit(main())
