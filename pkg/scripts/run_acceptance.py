"""Run the acceptance tests and print one PASS/FAIL line per criterion."""

import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]

proc = subprocess.run(
    [sys.executable, "-m", "pytest", "-s", "-q", "-p", "no:cacheprovider", "tests/test_acceptance.py"],
    cwd=ROOT,
    capture_output=True,
    text=True,
)
lines = [ln for ln in proc.stdout.splitlines() if ln.startswith(("PASS criterion", "FAIL criterion"))]
print("\n".join(sorted(lines, key=lambda ln: int(ln.split()[2].rstrip(":")))))
print(proc.stdout.strip().splitlines()[-1])
sys.exit(proc.returncode)
