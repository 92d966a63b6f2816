import sys

from iit.cli import main

sys.exit(main())
