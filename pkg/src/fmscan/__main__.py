import sys

from fmscan.cli import main

sys.exit(main())
