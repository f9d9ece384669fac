import sys

from robvio.cli import main

sys.exit(main())
