"""
Console runner shared by the test scripts
Each test file can be run directly (python test_x.py) or collected by pytest.
"""

import sys
import unittest
from typing import Callable, List, Tuple

import numpy as np


class SkipTest(unittest.SkipTest):
    """Raised by a test that cannot run in the current environment"""


def rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)


def run_test_suite(title: str, tests: List[Tuple[str, Callable[[], None]]]) -> bool:
    """
    Run tests, print a ✓/✗ line per test and a summary

    Returns:
        True when no test failed
    """
    print("\n" + "#" * 60)
    print(f"# {title}")
    print("#" * 60)

    results = {}
    for test_name, test_func in tests:
        try:
            test_func()
            results[test_name] = 'pass'
            print(f"✓ {test_name}")
        except SkipTest as e:
            results[test_name] = 'skip'
            print(f"⊘ {test_name} (skipped: {e})")
        except Exception as e:
            results[test_name] = 'fail'
            print(f"✗ {test_name}: {type(e).__name__}: {e}")

    passed = sum(1 for v in results.values() if v == 'pass')
    skipped = sum(1 for v in results.values() if v == 'skip')
    failed = len(results) - passed - skipped

    print("\n" + "#" * 60)
    print(f"# TEST SUMMARY: {passed} passed, {failed} failed, {skipped} skipped")
    print("#" * 60 + "\n")
    return failed == 0


def main(title: str, tests: List[Tuple[str, Callable[[], None]]]) -> None:
    sys.exit(0 if run_test_suite(title, tests) else 1)
