import sys

from scifig.cli import main

sys.exit(main())
