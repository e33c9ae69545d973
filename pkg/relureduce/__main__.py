"""relureduce/__main__.py"""

# std library
import sys

# own
from .cli import main

sys.exit(main())
