import sys

from counterdkl.main import main

sys.exit(main())
