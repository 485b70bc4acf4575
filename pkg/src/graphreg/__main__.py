import sys

from graphreg.cli import main

sys.exit(main())
