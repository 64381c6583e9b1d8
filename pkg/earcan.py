#!/usr/bin/env python3
"""
EarCAN - Ear-Canal Continuous Authentication
============================================

Main entry point for the experiment pipeline.

Usage:
    python earcan.py run-all                            # Default desk config
    python earcan.py run-all --config config/smoke.conf # Two-user smoke run
    python earcan.py train --config config/desk.conf    # Stages up to training
    python earcan.py run-all --seeds 7 8 9 10 11        # Seed sweep
"""

import sys
from pathlib import Path

# Add src to path
sys.path.insert(0, str(Path(__file__).parent))

from scripts.earcan_cli import main

if __name__ == "__main__":
    sys.exit(main())
