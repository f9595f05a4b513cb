#!/usr/bin/env python3
"""
ctSFTM Script: Estimate
Fits the nuisance models and solves for psi; writes the result JSON.
"""

import argparse
import os
import sys


def main():
    sys.path.insert(
        0, os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "lib")
    )
    from commands import cmd_estimate, configure_logging

    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("config", nargs="?", help="JSON configuration file")
    parser.add_argument("--log-level", default="INFO", help="DEBUG, INFO, WARNING")
    args = parser.parse_args()

    configure_logging(args.log_level)
    sys.exit(cmd_estimate(args.config))


if __name__ == "__main__":
    main()
