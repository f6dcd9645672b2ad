"""MoE step-time lab: training runs, sharding simulator and budget planner."""
import sys

from moe_lab.cli import cli_dispatch


def main():
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
