import sys

from figar.cli import main

sys.exit(main())
