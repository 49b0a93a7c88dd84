#!/usr/bin/env python3
"""
lesionpipe - command line entry point.

Usage:
    python main.py gradcheck --seed 7
    python main.py train --task 1 --config c.cfg --manifest m.csv --images dir --out model1.ckpt
    python main.py --help
"""

import os
import sys

# Add the project root to the path for imports
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from lesionpipe.cli import main

if __name__ == "__main__":
    main()
