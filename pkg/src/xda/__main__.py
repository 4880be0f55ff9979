import sys

from xda.cli import main

sys.exit(main())
