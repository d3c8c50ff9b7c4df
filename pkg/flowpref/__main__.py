"""Entry point for python -m flowpref."""

from .cli import main

if __name__ == "__main__":
    main()
