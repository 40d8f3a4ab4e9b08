from .management import main

main()
