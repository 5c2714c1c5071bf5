import sys

from tokenmoe.runner.cli import main

sys.exit(main())
