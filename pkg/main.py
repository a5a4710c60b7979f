"""
main.py - CLI entry point for development use.

For production, prefer:
    python -m hazeforge.cli dehaze ...
or install with `pip install -e .` and run:
    hazeforge dehaze ...

sys.path manipulation here is a fallback so that running `python main.py ...`
from a fresh checkout works without a prior editable install.
"""
import sys
from pathlib import Path

_src = Path(__file__).parent / "src"
if str(_src) not in sys.path:
    sys.path.insert(0, str(_src))

from hazeforge.cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
