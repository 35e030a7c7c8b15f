import sys

from titanet_lid.cli import main

sys.exit(main())
