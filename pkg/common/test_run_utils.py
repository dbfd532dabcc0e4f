"""Unit tests for the shared run helpers: retry, JSON config, logging and exit codes."""

import json
import logging
import os
import sys
import tempfile
import unittest
from pathlib import Path
from unittest.mock import MagicMock, patch

import requests

# Add repository root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from common import run_utils
from common.run_utils import (
    EXIT_DATA,
    EXIT_FAILURE,
    EXIT_NUMERICAL,
    EXIT_USAGE,
    RetryPolicy,
    exit_code_for,
    get_optional_env_var,
    get_required_env_var,
    get_with_retry,
    handle_error,
    load_json_config,
    parse_retry_spec,
    perform_request_with_retry,
    reset_json_config_cache,
    save_run_config,
    setup_logging,
)
from qpix.errors import (
    DomainError,
    FormatError,
    LayoutError,
    NumericalError,
    PreconditionError,
    SizeError,
    TruncatedDataError,
)

ENV_KEYS = [
    'QPIX_CONFIG', 'QPIX_RETRY', 'QPIX_LOG_LEVEL', 'QPIX_TEST_VAR', 'QPIX_CLASSES', 'QPIX_WARM_START',
    'GITHUB_ACTIONS', 'RUNNER_DEBUG', 'ACTIONS_STEP_DEBUG', 'ACTIONS_RUNNER_DEBUG',
]


def response(status_code):
    resp = MagicMock(spec=requests.Response)
    resp.status_code = status_code
    return resp


class TestRetrySpecParsing(unittest.TestCase):
    """Validate QPIX_RETRY format parsing."""

    def test_empty_returns_none(self):
        self.assertIsNone(parse_retry_spec(""))
        self.assertIsNone(parse_retry_spec(None))

    def test_immediately(self):
        self.assertEqual(parse_retry_spec("3*immediately"), RetryPolicy(3, "immediately", 0, "3*immediately"))

    def test_delay(self):
        policy = parse_retry_spec(" 2 * DELAY( 5 ) ")
        self.assertEqual((policy.strategy, policy.base_delay), ("delay", 5))
        self.assertEqual([policy.delay(i) for i in range(3)], [5, 5, 5])

    def test_exp(self):
        policy = parse_retry_spec("4*exp(3)")
        self.assertEqual((policy.retries, policy.strategy), (4, "exp"))
        self.assertEqual([policy.delay(i) for i in range(3)], [3, 6, 12])

    def test_invalid_raises(self):
        with self.assertRaises(ValueError):
            parse_retry_spec("retry-later")


class TestRetryExecution(unittest.TestCase):
    """Validate retry execution behavior."""

    def tearDown(self):
        for key in ENV_KEYS:
            os.environ.pop(key, None)
        reset_json_config_cache()

    def test_retries_on_retryable_status(self):
        send = MagicMock(side_effect=[response(503), response(200)])
        result = perform_request_with_retry(send, "http://example.test/a", {}, parse_retry_spec("1*immediately"))
        self.assertEqual(result.status_code, 200)
        self.assertEqual(send.call_count, 2)

    def test_returns_last_response_when_retries_run_out(self):
        send = MagicMock(side_effect=[response(503), response(503)])
        result = perform_request_with_retry(send, "http://example.test/a", {}, parse_retry_spec("1*immediately"))
        self.assertEqual(result.status_code, 503)
        self.assertEqual(send.call_count, 2)

    def test_retries_connection_errors(self):
        send = MagicMock(side_effect=[requests.ConnectionError("down"), response(200)])
        result = perform_request_with_retry(send, "http://example.test/a", {}, parse_retry_spec("2*immediately"))
        self.assertEqual(result.status_code, 200)

    def test_non_retryable_exception_is_raised(self):
        send = MagicMock(side_effect=requests.HTTPError("bad"))
        with self.assertRaises(requests.HTTPError):
            perform_request_with_retry(send, "http://example.test/a", {}, parse_retry_spec("3*immediately"))
        self.assertEqual(send.call_count, 1)

    @patch('common.run_utils.time.sleep')
    def test_exponential_delay(self, mock_sleep):
        send = MagicMock(side_effect=[response(500), response(502), response(200)])
        perform_request_with_retry(send, "http://example.test/a", {}, parse_retry_spec("2*exp(3)"))
        self.assertEqual([c.args[0] for c in mock_sleep.call_args_list], [3, 6])

    @patch('common.run_utils.requests.get')
    def test_get_with_retry_reads_env(self, mock_get):
        os.environ['QPIX_RETRY'] = '1*immediately'
        mock_get.side_effect = [response(429), response(200)]
        result = get_with_retry("http://example.test/file.gz", timeout=5)
        self.assertEqual(result.status_code, 200)
        mock_get.assert_called_with("http://example.test/file.gz", timeout=5)


class TestJsonConfig(unittest.TestCase):
    """Settings fall back to the JSON config file."""

    def setUp(self):
        reset_json_config_cache()
        for key in ENV_KEYS:
            os.environ.pop(key, None)
        self.tmpdir = tempfile.TemporaryDirectory()

    def tearDown(self):
        reset_json_config_cache()
        for key in ENV_KEYS:
            os.environ.pop(key, None)
        self.tmpdir.cleanup()

    def _write_config(self, doc):
        path = os.path.join(self.tmpdir.name, "run.json")
        with open(path, "w", encoding="utf-8") as f:
            json.dump(doc, f)
        os.environ['QPIX_CONFIG'] = path
        return path

    def test_values_are_converted_to_strings(self):
        self._write_config({"QPIX_CLASSES": [0, 1, 2], "QPIX_WARM_START": True, "QPIX_TEST_VAR": 7})
        self.assertEqual(get_optional_env_var("QPIX_CLASSES"), "0,1,2")
        self.assertEqual(get_optional_env_var("QPIX_WARM_START"), "true")
        self.assertEqual(get_required_env_var("QPIX_TEST_VAR"), "7")

    def test_environment_wins(self):
        self._write_config({"QPIX_TEST_VAR": "from-json"})
        os.environ['QPIX_TEST_VAR'] = 'from-env'
        self.assertEqual(get_optional_env_var("QPIX_TEST_VAR"), "from-env")

    def test_invalid_json_is_ignored(self):
        path = os.path.join(self.tmpdir.name, "broken.json")
        Path(path).write_text("{broken", encoding="utf-8")
        os.environ['QPIX_CONFIG'] = path
        self.assertIsNone(load_json_config())
        self.assertEqual(get_optional_env_var("QPIX_TEST_VAR", "fallback"), "fallback")

    def test_config_is_cached_until_reset(self):
        self._write_config({"QPIX_TEST_VAR": "first"})
        self.assertEqual(get_optional_env_var("QPIX_TEST_VAR"), "first")
        self._write_config({"QPIX_TEST_VAR": "second"})
        self.assertEqual(get_optional_env_var("QPIX_TEST_VAR"), "first")
        reset_json_config_cache()
        self.assertEqual(get_optional_env_var("QPIX_TEST_VAR"), "second")

    def test_missing_required_exits_with_usage_code(self):
        with self.assertRaises(SystemExit) as ctx:
            get_required_env_var("QPIX_TEST_VAR")
        self.assertEqual(ctx.exception.code, EXIT_USAGE)

    def test_github_debug_mode_defaults_log_level(self):
        os.environ['GITHUB_ACTIONS'] = 'true'
        os.environ['RUNNER_DEBUG'] = '1'
        self.assertEqual(get_optional_env_var("QPIX_LOG_LEVEL", "INFO"), "DEBUG")


class TestRunPlumbing(unittest.TestCase):

    def test_exit_codes(self):
        self.assertEqual(exit_code_for(FormatError("x")), EXIT_DATA)
        self.assertEqual(exit_code_for(TruncatedDataError("x")), EXIT_DATA)
        self.assertEqual(exit_code_for(LayoutError("x")), EXIT_DATA)
        self.assertEqual(exit_code_for(DomainError("x")), EXIT_DATA)
        self.assertEqual(exit_code_for(OSError("x")), EXIT_DATA)
        self.assertEqual(exit_code_for(NumericalError("x")), EXIT_NUMERICAL)
        self.assertEqual(exit_code_for(SizeError("x")), EXIT_NUMERICAL)
        self.assertEqual(exit_code_for(PreconditionError("x")), EXIT_NUMERICAL)
        self.assertEqual(exit_code_for(RuntimeError("x")), EXIT_FAILURE)

    def test_handle_error_exits(self):
        with self.assertRaises(SystemExit) as ctx:
            handle_error(NumericalError("svd"), "compress")
        self.assertEqual(ctx.exception.code, EXIT_NUMERICAL)

    def test_save_run_config(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = save_run_config(os.path.join(tmpdir, "out"), {"command": "train", "seed": 3})
            with open(path, encoding="utf-8") as f:
                self.assertEqual(json.load(f), {"command": "train", "seed": 3})
        self.assertTrue(path.endswith("run-config.json"))

    def test_setup_logging_level(self):
        logger = setup_logging("debug")
        self.assertEqual(logger.level, logging.DEBUG)
        self.assertEqual(setup_logging("nonsense").level, logging.INFO)
        self.assertIs(logger, logging.getLogger(run_utils.__name__))


if __name__ == '__main__':
    unittest.main()
