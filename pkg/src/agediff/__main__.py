import sys

from agediff.cli import main

sys.exit(main())
