"""Golden-file plumbing for byte-level regression tests.

Run `RELFUSE_RECORD_GOLDEN=1 python3 -m pytest ...` once to (re)record;
afterwards any byte drift fails the comparing test.
"""

from __future__ import annotations

import os
from pathlib import Path

GOLDEN_DIR = Path(__file__).parent / "golden"

RECORD = os.environ.get("RELFUSE_RECORD_GOLDEN") == "1"


def golden_bytes(name: str, produced: bytes) -> None:
    """Compare produced bytes against the stored golden file.

    In record mode the file is rewritten instead and the check passes.
    """
    path = GOLDEN_DIR / name
    if RECORD:
        GOLDEN_DIR.mkdir(parents=True, exist_ok=True)
        path.write_bytes(produced)
        return
    if not path.is_file():
        raise AssertionError(
            f"golden file {path} is missing; record it with "
            "RELFUSE_RECORD_GOLDEN=1 python3 -m pytest"
        )
    stored = path.read_bytes()
    if produced != stored:
        raise AssertionError(
            f"output drifted from {path} "
            f"({len(produced)} bytes produced vs {len(stored)} stored); "
            "if the change is intended, re-record with "
            "RELFUSE_RECORD_GOLDEN=1"
        )
