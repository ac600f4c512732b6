import sys

from duallevel.cli import main

sys.exit(main())
