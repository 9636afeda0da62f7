import sys

from spotsgd.cli import main

sys.exit(main())
