import sys

from robfpca.cli import main

sys.exit(main())
