import sys

from coasting.cli import main

sys.exit(main())
