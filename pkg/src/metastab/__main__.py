import sys

from metastab.cli import main

sys.exit(main())
