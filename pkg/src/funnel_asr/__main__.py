import sys

from funnel_asr.cli import main

sys.exit(main())
