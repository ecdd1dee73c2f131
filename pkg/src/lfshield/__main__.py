from lfshield.cli import main
import sys

sys.exit(main())
