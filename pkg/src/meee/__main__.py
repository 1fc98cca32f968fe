import sys

from meee.cli import main

sys.exit(main())
