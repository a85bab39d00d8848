import sys

from sgplvm.main import main

sys.exit(main())
