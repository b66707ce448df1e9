import sys

from sren.cli import main

sys.exit(main())
