import sys

from palmpipe.cli import main

sys.exit(main())
