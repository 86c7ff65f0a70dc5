#!/usr/bin/env python3
"""
WCL-RE - weighted contrastive pre-training for relation extraction.

Usage:
    python3 main.py <command> [options]      (same as `wclre`)
    python3 main.py --help
"""

import sys

from cli import run

if __name__ == '__main__':
    sys.exit(run(sys.argv[1:]))
