import sys

from mosynth.cli import main

sys.exit(main())
