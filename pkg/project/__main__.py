from project.cli import main

raise SystemExit(main())
