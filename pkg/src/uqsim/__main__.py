import sys

from .reportcli import main

sys.exit(main())
