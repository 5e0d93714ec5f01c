"""Enable ``python -m posekey``."""

import sys

from posekey.cli import main

sys.exit(main())
