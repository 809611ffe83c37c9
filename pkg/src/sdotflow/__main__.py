import sys

from sdotflow.cli import main

sys.exit(main())
