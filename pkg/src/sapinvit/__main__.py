"""Allow ``python -m sapinvit``."""

import sys

from .cli import main

sys.exit(main())
