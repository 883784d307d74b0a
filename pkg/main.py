"""Command-line entry point for the AdaptIS toy pipeline."""

from adaptis.cli import main as _main


if __name__ == "__main__":
    raise SystemExit(_main())
