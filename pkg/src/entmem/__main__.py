import sys

from entmem.cli import main

sys.exit(main())
