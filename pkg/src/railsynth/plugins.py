"""Line-oriented subprocess plugin protocol.

External ML backends (detector/segmenter/flow models) run as child
processes. The tool writes one JSON request per line to the child's stdin
and reads one JSON response line from its stdout. A client allows one
in-flight request at a time; callers needing parallelism pool clients.
"""

from __future__ import annotations

import json
import select
import shlex
import subprocess
import threading
import time

from .errors import PluginError

DEFAULT_TIMEOUT = 30.0


class PluginClient:
    """Owns one child process speaking the line protocol."""

    def __init__(self, command: str | list[str], timeout: float = DEFAULT_TIMEOUT):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout
        self._lock = threading.Lock()
        self._proc: subprocess.Popen | None = None

    @property
    def name(self) -> str:
        return self.command[0] if self.command else "<empty>"

    def _ensure_started(self):
        if self._proc is None or self._proc.poll() is not None:
            try:
                self._proc = subprocess.Popen(
                    self.command,
                    stdin=subprocess.PIPE,
                    stdout=subprocess.PIPE,
                    stderr=subprocess.DEVNULL,
                    text=True,
                    bufsize=1,
                )
            except OSError as exc:
                raise PluginError(f"plugin {self.name!r}: failed to spawn: {exc}") from exc

    def request(self, payload: dict) -> dict:
        """Send one request line, wait for one response line."""
        with self._lock:
            self._ensure_started()
            proc = self._proc
            try:
                proc.stdin.write(json.dumps(payload) + "\n")
                proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                raise PluginError(
                    f"plugin {self.name!r}: child closed stdin "
                    f"(exit code {proc.poll()})") from exc
            line = self._read_line(proc)
            try:
                response = json.loads(line)
            except json.JSONDecodeError as exc:
                raise PluginError(
                    f"plugin {self.name!r}: response is not valid JSON: {line!r}") from exc
            if not isinstance(response, dict):
                raise PluginError(
                    f"plugin {self.name!r}: response must be an object, got {response!r}")
            if "error" in response:
                raise PluginError(f"plugin {self.name!r}: {response['error']}")
            return response

    def _read_line(self, proc: subprocess.Popen) -> str:
        deadline = time.monotonic() + self.timeout
        buf = ""
        fd = proc.stdout.fileno()
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                self.close(kill=True)
                raise PluginError(
                    f"plugin {self.name!r}: timed out after {self.timeout:.1f}s")
            ready, _, _ = select.select([fd], [], [], min(remaining, 0.25))
            if not ready:
                if proc.poll() is not None and not buf:
                    raise PluginError(
                        f"plugin {self.name!r}: exited with code {proc.returncode} "
                        f"before responding")
                continue
            chunk = proc.stdout.readline()
            if chunk == "":
                raise PluginError(
                    f"plugin {self.name!r}: stdout closed "
                    f"(exit code {proc.poll()}) before responding")
            buf += chunk
            if buf.endswith("\n"):
                return buf

    def close(self, kill: bool = False):
        proc, self._proc = self._proc, None
        if proc is None:
            return
        try:
            if kill:
                proc.kill()
            else:
                if proc.stdin:
                    proc.stdin.close()
                try:
                    proc.wait(timeout=2.0)
                except subprocess.TimeoutExpired:
                    proc.kill()
            proc.wait(timeout=2.0)
        except Exception:
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
