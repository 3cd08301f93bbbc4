import sys

from externreg.cli import main

sys.exit(main())
