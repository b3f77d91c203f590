import sys
from dgsplat.cli import main
sys.exit(main())
