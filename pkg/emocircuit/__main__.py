import sys

from emocircuit.harness.cli import main

sys.exit(main())
