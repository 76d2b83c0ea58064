import sys

from kgcg.cli import run

sys.exit(run())
