import sys

from spikewm.cli import main

sys.exit(main())
