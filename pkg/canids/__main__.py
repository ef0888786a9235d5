from canids.cli import main

main()
