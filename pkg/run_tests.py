#!/usr/bin/env python3
"""
run_tests.py

Test runner for levylab.

Usage:
    python run_tests.py                        # unit and integration suites
    python run_tests.py unit                   # unit suites only
    python run_tests.py unit sde_lab density   # suites whose module name matches
    python run_tests.py --acceptance           # add the slow pytest scenarios
    python run_tests.py -v                     # more output
    python run_tests.py --coverage             # line coverage of the levylab modules
    python run_tests.py --lint                 # flake8 over sources and tests

Run output (CSV tables, manifests, logs) goes to a temporary
LEVYLAB_OUTPUT_ROOT that is removed afterwards.
"""

import os
import shutil
import subprocess
import sys
import tempfile
import unittest
from pathlib import Path

PROJECT_ROOT = Path(__file__).parent
TESTS_DIR = PROJECT_ROOT / 'tests'
SUITES = ('unit', 'integration')
ACCEPTANCE_FILE = TESTS_DIR / 'test_acceptance.py'
SOURCES = sorted(str(p) for p in PROJECT_ROOT.glob('*.py'))
COVERAGE_OMIT = ['*/tests/*', '*/examples/*', '*/run_tests.py']

sys.path.insert(0, str(PROJECT_ROOT))


def suite_files(suite, modules=()):
    """test_*.py files of one suite, narrowed to names containing any of modules."""
    files = sorted((TESTS_DIR / suite).glob('test_*.py'))
    if modules:
        files = [f for f in files if any(m in f.stem for m in modules)]
    return files


def discover_tests(suites=SUITES, modules=()):
    loader = unittest.TestLoader()
    collected = unittest.TestSuite()
    for suite in suites:
        for path in suite_files(suite, modules):
            name = f"tests.{suite}.{path.stem}"
            collected.addTests(loader.loadTestsFromName(name))
    return collected


def run_acceptance(verbosity):
    """Slow Monte Carlo scenarios; these are plain pytest functions."""
    import pytest

    args = [str(ACCEPTANCE_FILE), '-m', 'slow']
    if verbosity > 1:
        args.append('-v')
    return pytest.main(args)


def start_coverage():
    import coverage

    cov = coverage.Coverage(source=[str(PROJECT_ROOT)], omit=COVERAGE_OMIT)
    cov.start()
    return cov


def finish_coverage(cov):
    cov.stop()
    cov.save()
    print()
    return cov.report(show_missing=False)


def run_lint():
    """flake8 with the settings in .flake8; returns its exit status."""
    command = [sys.executable, '-m', 'flake8', *SOURCES, str(TESTS_DIR)]
    return subprocess.run(command, cwd=PROJECT_ROOT).returncode


def main():
    import argparse

    parser = argparse.ArgumentParser(description='Run the levylab test suites')
    parser.add_argument('suite', nargs='?', choices=SUITES,
                        help='unit or integration (default: both)')
    parser.add_argument('modules', nargs='*',
                        help='only test files whose name contains one of these')
    parser.add_argument('-v', '--verbose', action='count', default=1,
                        help='Increase output verbosity')
    parser.add_argument('--failfast', action='store_true', help='Stop on first failure')
    parser.add_argument('--acceptance', action='store_true',
                        help='Also run tests/test_acceptance.py under pytest')
    parser.add_argument('--coverage', action='store_true',
                        help='Measure line coverage of the levylab modules')
    parser.add_argument('--lint', action='store_true', help='Run flake8 before the tests')
    args = parser.parse_args()

    suites = (args.suite,) if args.suite else SUITES
    lint_status = run_lint() if args.lint else 0
    cov = start_coverage() if args.coverage else None
    output_root = tempfile.mkdtemp(prefix='levylab-tests-')
    os.environ['LEVYLAB_OUTPUT_ROOT'] = output_root
    try:
        result = unittest.TextTestRunner(verbosity=args.verbose, failfast=args.failfast).run(
            discover_tests(suites, args.modules)
        )
        acceptance_status = run_acceptance(args.verbose) if args.acceptance else 0
    finally:
        percent = finish_coverage(cov) if cov is not None else None
        shutil.rmtree(output_root, ignore_errors=True)

    print("\n" + "=" * 70)
    print(f"suites: {', '.join(suites)}" + (f"  modules: {', '.join(args.modules)}" if args.modules else ""))
    print(f"ran {result.testsRun}, failures {len(result.failures)}, "
          f"errors {len(result.errors)}, skipped {len(result.skipped)}")
    if args.acceptance:
        print(f"acceptance: {'passed' if acceptance_status == 0 else f'exit status {int(acceptance_status)}'}")
    if args.lint:
        print(f"flake8: {'clean' if lint_status == 0 else f'exit status {lint_status}'}")
    if percent is not None:
        print(f"coverage: {percent:.1f}%")
    print("=" * 70)

    return 0 if result.wasSuccessful() and acceptance_status == 0 and lint_status == 0 else 1


if __name__ == '__main__':
    sys.exit(main())
