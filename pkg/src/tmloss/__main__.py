import sys

from tmloss.cli import main

sys.exit(main())
