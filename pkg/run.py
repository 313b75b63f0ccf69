import sys
from pathlib import Path


def main():
    """
    Helper script to run the command line without installing the package.
    Usage: python run.py <simulate|estimate|cv|reproduce> [options]
    """
    root = Path(__file__).resolve().parent
    if str(root) not in sys.path:
        sys.path.insert(0, str(root))

    from keceni_analysis.cli.main import main as cli_main

    return cli_main(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
