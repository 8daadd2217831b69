import sys

from slotgate.cli import main


sys.exit(main())
