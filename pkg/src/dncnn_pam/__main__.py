import sys

from dncnn_pam.cli import main

sys.exit(main())
