"""Support ``python -m oilmsi``."""
import sys

from .cli import main

sys.exit(main())
