import sys

from popsteer.cli import main

sys.exit(main())
