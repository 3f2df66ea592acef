import sys

from fedcorrect.cli import main

sys.exit(main())
