import sys

from ctxfed.cli import main

sys.exit(main())
