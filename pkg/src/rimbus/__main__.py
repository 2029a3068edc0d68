from rimbus.cli import main

raise SystemExit(main())
