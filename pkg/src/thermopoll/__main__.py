import sys

from thermopoll.cli import main

sys.exit(main())
