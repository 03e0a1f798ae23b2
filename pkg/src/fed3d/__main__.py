import sys

from fed3d.cli import main

sys.exit(main())
