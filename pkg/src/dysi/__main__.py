import sys

from dysi.cli import main

sys.exit(main())
