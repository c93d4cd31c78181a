from atcl.cli import main

raise SystemExit(main())
