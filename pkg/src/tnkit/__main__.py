import sys

from tnkit.cli import main

sys.exit(main())
