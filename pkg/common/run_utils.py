"""
Run plumbing shared by the qpix commands: settings lookup, download retries,
logging setup, run-config echo and exit codes.
"""

import json
import logging
import os
import re
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Optional

import requests

# Module-level logger
logger = logging.getLogger(__name__)

EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

CONFIG_ENV_VAR = "QPIX_CONFIG"
DEFAULT_CONFIG_FILE = "qpix.json"
RETRY_ENV_VAR = "QPIX_RETRY"
LOG_LEVEL_ENV_VAR = "QPIX_LOG_LEVEL"

RETRYABLE_STATUS_CODES = frozenset({408, 425, 429, 500, 502, 503, 504})
_TRUTHY = ("1", "true", "yes", "on")
_GITHUB_DEBUG_VARS = ("RUNNER_DEBUG", "ACTIONS_STEP_DEBUG", "ACTIONS_RUNNER_DEBUG")
_RETRY_PATTERN = re.compile(
    r"\s*(?P<retries>\d+)\s*\*\s*(?:(?P<now>immediately)|(?P<kind>delay|exp)\s*\(\s*(?P<seconds>\d+)\s*\))\s*",
    re.IGNORECASE,
)

# parsed JSON config; "loaded" flips once per process unless reset
_config_state: Dict[str, Any] = {"loaded": False, "doc": None}


@dataclass(frozen=True)
class RetryPolicy:
    """How often and how patiently a failed download is retried."""

    retries: int
    strategy: str
    base_delay: int = 0
    raw: str = ""

    def delay(self, retry_index: int) -> int:
        """Seconds to wait before retry number ``retry_index`` (0-based)."""
        if self.strategy == "delay":
            return self.base_delay
        if self.strategy == "exp":
            return self.base_delay * 2 ** retry_index
        return 0


def parse_retry_spec(text: Optional[str]) -> Optional[RetryPolicy]:
    """
    Parse a QPIX_RETRY value: ``N*immediately``, ``N*delay(S)`` or ``N*exp(S)``.

    Returns None for an empty value.

    Raises:
        ValueError: If the value does not follow the grammar.
    """
    text = (text or "").strip()
    if not text:
        return None
    match = _RETRY_PATTERN.fullmatch(text)
    if match is None:
        raise ValueError(
            f"Invalid {RETRY_ENV_VAR} value {text!r}; expected <retries>*immediately, "
            "<retries>*delay(<seconds>) or <retries>*exp(<seconds>)"
        )
    retries = int(match.group("retries"))
    if match.group("now"):
        return RetryPolicy(retries, "immediately", 0, text)
    return RetryPolicy(retries, match.group("kind").lower(), int(match.group("seconds")), text)


def _pause(policy: RetryPolicy, retry_index: int, url: str, reason: str) -> None:
    seconds = policy.delay(retry_index)
    when = f"in {seconds}s" if seconds > 0 else "now"
    logger.warning(f"GET {url} {reason} (attempt {retry_index + 1}/{policy.retries + 1}); retrying {when}")
    if seconds > 0:
        time.sleep(seconds)


def perform_request_with_retry(
    send: Callable[..., requests.Response],
    url: str,
    kwargs: Dict[str, Any],
    policy: Optional[RetryPolicy],
) -> requests.Response:
    """
    Call ``send(url, **kwargs)`` under ``policy``.

    Retryable status codes and connection failures are retried; once the retries are
    spent the last response is returned (or the last exception raised).
    """
    for retry_index in range(policy.retries if policy else 0):
        try:
            response = send(url, **kwargs)
        except (requests.Timeout, requests.ConnectionError) as exc:
            _pause(policy, retry_index, url, f"raised {type(exc).__name__}")
            continue
        if response.status_code not in RETRYABLE_STATUS_CODES:
            return response
        _pause(policy, retry_index, url, f"returned HTTP {response.status_code}")
    return send(url, **kwargs)


def get_with_retry(url: str, **kwargs) -> requests.Response:
    """``requests.get`` under the QPIX_RETRY policy."""
    policy = parse_retry_spec(get_optional_env_var(RETRY_ENV_VAR))
    return perform_request_with_retry(requests.get, url, kwargs, policy)


def load_json_config() -> Optional[Dict[str, Any]]:
    """
    The JSON settings file named by QPIX_CONFIG (default ``./qpix.json``), parsed once.

    A missing or malformed file yields None; the error is logged, not raised.
    """
    if _config_state["loaded"]:
        return _config_state["doc"]
    _config_state["loaded"] = True

    path = Path(os.getenv(CONFIG_ENV_VAR) or DEFAULT_CONFIG_FILE)
    if not path.is_absolute():
        path = Path.cwd() / path
    if not path.exists():
        logger.debug(f"No JSON config at {path}")
        return None
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, OSError) as exc:
        logger.error(f"Ignoring JSON config {path}: {exc}")
        return None
    if not isinstance(doc, dict):
        logger.error(f"Ignoring JSON config {path}: top level must be an object")
        return None
    logger.info(f"Loaded settings from {path}")
    _config_state["doc"] = doc
    return doc


def reset_json_config_cache() -> None:
    """Forget the parsed JSON config so the next lookup reads the file again."""
    _config_state.update(loaded=False, doc=None)


def setup_logging(level: str = "INFO") -> logging.Logger:
    """Configure root logging to stdout and return this module's logger."""
    log_level = getattr(logging, str(level).upper(), None)
    if not isinstance(log_level, int):
        log_level = logging.INFO
    logging.basicConfig(
        level=log_level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[logging.StreamHandler(sys.stdout)],
        force=True,
    )
    logger.setLevel(log_level)
    return logger


def _truthy(value: Optional[str]) -> bool:
    return bool(value) and value.strip().lower() in _TRUTHY


def _github_debug_logging() -> bool:
    return _truthy(os.getenv("GITHUB_ACTIONS")) and any(_truthy(os.getenv(name)) for name in _GITHUB_DEBUG_VARS)


def _as_env_string(value: Any) -> str:
    """Render a JSON config value the way it would appear in an environment variable."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(str(item) for item in value)
    if isinstance(value, dict):
        return json.dumps(value)
    return str(value)


def _setting_value(name: str) -> str:
    value = os.getenv(name)
    if value:
        return value
    doc = load_json_config()
    if doc and doc.get(name) is not None:
        logger.debug(f"{name} taken from the JSON config")
        return _as_env_string(doc[name])
    return ""


def get_required_env_var(var_name: str) -> str:
    """A setting that must be present; exits with the usage code otherwise."""
    value = _setting_value(var_name)
    if not value:
        logger.error(f"Required setting {var_name} is not set in the environment or the JSON config")
        sys.exit(EXIT_USAGE)
    return value


def get_optional_env_var(var_name: str, default: str = "") -> str:
    """
    A setting from the environment, else the JSON config, else ``default``.

    QPIX_LOG_LEVEL falls back to DEBUG when GitHub Actions debug logging is on.
    """
    value = _setting_value(var_name)
    if not value and var_name == LOG_LEVEL_ENV_VAR and _github_debug_logging():
        value = "DEBUG"
    return value or default


def save_run_config(output_dir: str, config: Dict[str, Any]) -> str:
    """Write ``config`` to ``<output_dir>/run-config.json`` and return the path."""
    os.makedirs(output_dir, exist_ok=True)
    path = os.path.join(output_dir, "run-config.json")
    try:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(config, f, ensure_ascii=False, indent=2, sort_keys=True, default=str)
    except OSError as exc:
        raise OSError(f"Failed to write run config {path}: {exc}") from exc
    logger.debug(f"Saved run config to {path}")
    return path


def exit_code_for(error: BaseException) -> int:
    """CLI exit code for an exception: 3 data/format/I-O, 4 numerical, 1 otherwise."""
    from qpix.errors import (
        DomainError, FormatError, LayoutError, NumericalError,
        PreconditionError, ShapeError, SizeError,
    )

    if isinstance(error, (FormatError, DomainError, LayoutError, ShapeError, OSError)):
        return EXIT_DATA
    if isinstance(error, (NumericalError, SizeError, PreconditionError, FloatingPointError)):
        return EXIT_NUMERICAL
    return EXIT_FAILURE


def handle_error(error: BaseException, command: str) -> None:
    """Log ``error`` and exit with its code."""
    logger.error(f"{command} failed: {error}")
    sys.exit(exit_code_for(error))


def log_artifact(kind: str, path: str) -> None:
    logger.info(f"Wrote {kind}: {path}")
