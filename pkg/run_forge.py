import sys

from depth_forge.cli import main


if __name__ == "__main__":
    sys.exit(main())
