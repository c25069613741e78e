import sys

from src.idlewatch.cli import main

if __name__ == "__main__":
    sys.exit(main())
