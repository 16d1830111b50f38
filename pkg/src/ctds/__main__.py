from ctds.cli import main
import sys

sys.exit(main())
