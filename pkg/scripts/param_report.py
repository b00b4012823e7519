"""Print parameter counts per variant and receptive fields per dilation schedule."""
import sys

from hcmamba.cli import main

if __name__ == "__main__":
    sys.exit(main(["report", *sys.argv[1:]]))
