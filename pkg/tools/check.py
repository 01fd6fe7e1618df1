import subprocess
import sys


def run():
    cmds = [
        ["black", "--check", "piano_mlr", "tests", "tools"],
        ["isort", "--check-only", "piano_mlr", "tests", "tools"],
        ["flake8", "--ignore=E501,E203,E741,W503", "piano_mlr", "tests", "tools"],
        ["mypy", "piano_mlr/"],
        ["pytest", "-m", "not slow"],
    ]
    failed = []
    for cmd in cmds:
        print(f"\n▶ Running: {' '.join(cmd)}")
        result = subprocess.run(["poetry", "run"] + cmd, check=False)
        if result.returncode != 0:
            failed.append(cmd[0])
    if failed:
        print(f"\n✗ Failed: {', '.join(failed)}")
        sys.exit(1)
    print("\n✓ All checks passed")
