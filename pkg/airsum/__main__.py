import sys

from airsum.cli import main

sys.exit(main())
