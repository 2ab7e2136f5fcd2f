"""
tests/unit/test_errors_and_utils.py

Unit tests for the error hierarchy, the stage decorator and the helpers
for seeds, digests and parsing.
"""

import os
import shutil
import sys
import tempfile
import unittest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.dirname(__file__))))

from error_handlers import (
    EXIT_CONFIG_INVALID,
    EXIT_STAGE_FAILED,
    ConfigInvalid,
    DegenerateMeasure,
    StageFailed,
    error_payload,
    exit_code_for,
    handle_stage_errors,
)
from utils import (
    derive_seed,
    ensure_directory,
    file_digest,
    fixed_order_mean,
    parse_float_list,
    parse_vector_list,
    safe_int,
)


class TestStageErrors(unittest.TestCase):

    def test_library_error_is_wrapped(self):
        @handle_stage_errors("density")
        def stage():
            raise DegenerateMeasure("measure lives on a line", minimum=0.0)

        with self.assertRaises(StageFailed) as ctx:
            stage()
        error = ctx.exception
        self.assertEqual(error.stage, "density")
        self.assertIsInstance(error.original_error, DegenerateMeasure)
        payload = error_payload(error)
        self.assertEqual(payload["error_code"], "DEGENERATE_MEASURE")
        self.assertEqual(payload["stage"], "density")
        self.assertEqual(exit_code_for(error), EXIT_STAGE_FAILED)

    def test_unexpected_error_is_wrapped(self):
        @handle_stage_errors("sweep")
        def stage():
            raise ZeroDivisionError("boom")

        with self.assertRaises(StageFailed) as ctx:
            stage()
        self.assertEqual(error_payload(ctx.exception)["error_code"], "INTERNAL_ERROR")

    def test_config_errors_pass_through(self):
        @handle_stage_errors("resolvent")
        def stage():
            raise ConfigInvalid("bad value", "numerics", "lambda")

        with self.assertRaises(ConfigInvalid) as ctx:
            stage()
        self.assertEqual(str(ctx.exception), "[numerics] lambda: bad value")
        self.assertEqual(exit_code_for(ctx.exception), EXIT_CONFIG_INVALID)

    def test_no_double_wrapping(self):
        @handle_stage_errors("outer")
        @handle_stage_errors("inner")
        def stage():
            raise DegenerateMeasure("flat")

        with self.assertRaises(StageFailed) as ctx:
            stage()
        self.assertEqual(ctx.exception.stage, "inner")

    def test_plain_exception_payload(self):
        self.assertEqual(error_payload(ValueError("x")), {"error": "x", "error_code": "INTERNAL_ERROR", "stage": None})
        self.assertEqual(exit_code_for(ValueError("x")), EXIT_STAGE_FAILED)


class TestSeeds(unittest.TestCase):

    def test_derive_seed_is_stable(self):
        self.assertEqual(derive_seed(1, "sweep", 3), derive_seed(1, "sweep", 3))
        self.assertNotEqual(derive_seed(1, "sweep", 3), derive_seed(1, "sweep", 4))
        self.assertNotEqual(derive_seed(1, "sweep"), derive_seed(2, "sweep"))
        self.assertTrue(0 <= derive_seed(0) < 2 ** 64)

    def test_fixed_order_mean(self):
        self.assertEqual(fixed_order_mean([1.0, 2.0, 6.0]), 3.0)
        self.assertNotEqual(fixed_order_mean([]), fixed_order_mean([]))


class TestFiles(unittest.TestCase):

    def setUp(self):
        self.directory = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.directory)

    def test_file_digest(self):
        path = os.path.join(ensure_directory(os.path.join(self.directory, "a", "b")), "x.txt")
        with open(path, "wb") as handle:
            handle.write(b"abc")
        self.assertEqual(
            file_digest(path), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        )


class TestParsingHelpers(unittest.TestCase):

    def test_lists(self):
        self.assertEqual(parse_float_list("2, 5 10"), [2.0, 5.0, 10.0])
        self.assertEqual(parse_float_list(""), [])
        self.assertEqual(parse_vector_list("1 0; 0 1"), [[1.0, 0.0], [0.0, 1.0]])
        with self.assertRaises(ValueError):
            parse_float_list("1, two")

    def test_safe_conversions(self):
        self.assertEqual(safe_int("7"), 7)
        self.assertEqual(safe_int("x", 3), 3)
        self.assertEqual(safe_int(None, 2), 2)


if __name__ == '__main__':
    unittest.main()
