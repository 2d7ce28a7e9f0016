"""
evaluator_connection.py - Line-delimited JSON transport to an evaluator child process.

One request line in, one response line out, in order. A reader thread moves
stdout lines onto a queue so every read can time out.
"""
from __future__ import annotations

import json
import logging
import queue
import shlex
import subprocess
import threading
from typing import Dict, Iterable, List, Optional, Sequence, Union

LOGGER = logging.getLogger(__name__)

_EOF = object()


class EvaluatorError(RuntimeError):
    """The evaluator answered, but not with a usable value."""


class ProtocolError(EvaluatorError):
    """A response line was not a well-formed response object."""


class EvaluatorTimeoutError(EvaluatorError):
    """No response line arrived in time."""


class EvaluatorExitError(EvaluatorError):
    """The child process ended while requests were outstanding."""

    def __init__(self, message: str, returncode: Optional[int]):
        super().__init__(message)
        self.returncode = returncode


def _read_lines(stream, lines: "queue.Queue") -> None:
    for line in iter(stream.readline, ""):
        lines.put(line)
    lines.put(_EOF)


class EvaluatorConnection:
    def __init__(self, command: Union[str, Sequence[str]], timeout: float = 30.0):
        """
        Start the evaluator child process.

        Args:
            command: command line, either a shell-style string or an argument list.
            timeout: seconds to wait for each response line.

        Raises:
            EvaluatorExitError: if the process cannot be started.
        """
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout
        try:
            self._proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as e:
            raise EvaluatorExitError(f"cannot start evaluator {self.command}: {e}", None) from e
        self._lines: "queue.Queue" = queue.Queue()
        self._reader = threading.Thread(target=_read_lines, args=(self._proc.stdout, self._lines), daemon=True)
        self._reader.start()
        LOGGER.debug("started evaluator pid %d: %s", self._proc.pid, " ".join(self.command))

    def send(self, payload: Dict) -> None:
        try:
            self._proc.stdin.write(json.dumps(payload, separators=(",", ":")) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as e:
            raise EvaluatorExitError(f"evaluator closed its input: {e}", self._proc.poll()) from e

    def receive(self) -> Dict:
        try:
            line = self._lines.get(timeout=self.timeout)
        except queue.Empty:
            raise EvaluatorTimeoutError(f"no response within {self.timeout}s") from None
        if line is _EOF:
            try:
                returncode = self._proc.wait(timeout=self.timeout)
            except subprocess.TimeoutExpired:
                returncode = None
            raise EvaluatorExitError(f"evaluator exited with status {returncode}", returncode)
        return parse_response(line)

    def request(self, payload: Dict) -> Dict:
        self.send(payload)
        return self.receive()

    def request_many(self, payloads: Iterable[Dict]) -> List[Dict]:
        """Write every request first, then read the responses in order."""
        sent = 0
        for payload in payloads:
            self.send(payload)
            sent += 1
        return [self.receive() for _ in range(sent)]

    def close(self) -> None:
        if self._proc.poll() is None:
            try:
                self._proc.stdin.close()
                self._proc.wait(timeout=self.timeout)
            except (OSError, subprocess.TimeoutExpired):
                self._proc.kill()
                self._proc.wait()
        LOGGER.debug("evaluator pid %d finished with status %s", self._proc.pid, self._proc.returncode)

    def kill(self) -> None:
        """Stop the child at once; unread responses are discarded with it."""
        if self._proc.poll() is None:
            self._proc.kill()
        self._proc.wait()
        try:
            self._proc.stdin.close()
        except OSError:
            pass
        LOGGER.debug("killed evaluator pid %d", self._proc.pid)

    def __enter__(self) -> "EvaluatorConnection":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def parse_response(line: str) -> Dict:
    """Decode one response line, `{"ok": true, "value": <float>}` or `{"ok": false, "message": ...}`."""
    try:
        response = json.loads(line)
    except json.JSONDecodeError as e:
        raise ProtocolError(f"malformed response line {line.strip()!r}: {e}") from e
    if not isinstance(response, dict) or not isinstance(response.get("ok"), bool):
        raise ProtocolError(f"response without boolean 'ok': {line.strip()!r}")
    if response["ok"]:
        value = response.get("value")
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ProtocolError(f"response without numeric 'value': {line.strip()!r}")
    return response
