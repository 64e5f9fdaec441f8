import sys

from permsort.cli import main

sys.exit(main())
