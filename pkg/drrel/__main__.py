import sys

from drrel.cli import main

sys.exit(main())
