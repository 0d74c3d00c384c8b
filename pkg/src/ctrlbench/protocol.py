"""Controllers running as subprocesses, spoken to with newline-delimited JSON.

Wire contract, one JSON object per line:

* harness -> client, once per episode::

    {"type": "hello", "system": 3, "episode": 1, "p": 4, "d": 2, "grid": [...]}

  the client answers ``{"type": "ready"}`` (startup time is not charged to
  the per-step budget).
* harness -> client, at every step ``l``::

    {"type": "query", "step": l, "t": t_l, "Z": [..], "W": [..], "dZ": [..],
     "dW": [..], "target": [x, y]}

  ``target`` is the target point for the next grid time.
* client -> harness, one reply per query, in order::

    {"U": [..p numbers..]}          (optionally with "step": l)

* harness -> client at the end: ``{"type": "end"}``; then stdin closes.

The budget is wall-clock compute time: it runs from writing the query, or
from the arrival of the client's late reply to an earlier query if that comes
later, to receiving the reply's newline.  Clients answer in order, so a client
still busy with a slow step is not charged for the queries queued behind it.
The harness waits at most ``catchup`` seconds for such late replies.  A reply
that misses the budget, does not parse, carries the wrong step, or has the
wrong dimension becomes zero control for that step.  Late replies are matched
to their own query by arrival order and discarded.  If the process exits, the
episode is aborted.
"""

from __future__ import annotations

import json
import logging
import os
import queue
import shlex
import subprocess
import sys
import threading
import time
from dataclasses import dataclass

import numpy as np

from .controllers.base import ControllerDied, EpisodeInfo
from .robots import Observation

log = logging.getLogger(__name__)

DEFAULT_BUDGET_S = 0.05
STARTUP_TIMEOUT_S = 30.0
CATCHUP_TIMEOUT_S = 5.0
_EOF = object()


@dataclass
class StepEvent:
    """A substituted step: ``reason`` is ``timeout``, ``parse``, ``step`` or ``shape``."""

    step: int
    reason: str
    detail: str = ""


def query_record(step: int, obs: Observation, target) -> dict:
    return {
        "type": "query",
        "step": int(step),
        "t": float(obs.t),
        "Z": np.asarray(obs.Z, float).tolist(),
        "W": np.asarray(obs.W, float).ravel().tolist(),
        "dZ": np.asarray(obs.dZ, float).tolist(),
        "dW": np.asarray(obs.dW, float).ravel().tolist(),
        "target": np.asarray(target, float).tolist(),
    }


def observation_from_record(rec: dict) -> Observation:
    """Inverse of :func:`query_record` for clients."""
    return Observation(
        np.asarray(rec["W"], float), np.asarray(rec["Z"], float), np.asarray(rec["dW"], float),
        np.asarray(rec["dZ"], float), float(rec["t"]),
    )


class SubprocessController:
    """Run one controller process per episode and talk to it over pipes.

    Args:
        command: executable and arguments (a list, or a string split with shlex).
        budget: seconds allowed per reply.
        startup_timeout: seconds allowed for the ``ready`` handshake.
        catchup: seconds to wait for late replies to earlier queries before
            the budget of a new query starts regardless.
    """

    def __init__(self, command, budget: float = DEFAULT_BUDGET_S, *,
                 startup_timeout: float = STARTUP_TIMEOUT_S, catchup: float = CATCHUP_TIMEOUT_S,
                 env: dict | None = None):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.budget = float(budget)
        self.startup_timeout = float(startup_timeout)
        self.catchup = float(catchup)
        self.env = env
        self.proc: subprocess.Popen | None = None
        self.events: list[StepEvent] = []
        self.latencies: list[float] = []
        self._lines: queue.Queue = queue.Queue()
        self._owed: list[int] = []      # steps whose replies are still outstanding
        self._stalled = False
        self._p = 0
        self._last_step = -1
        self._stderr: list[str] = []

    # -- process management ------------------------------------------------

    def _reader(self, stream, sink) -> None:
        for line in stream:
            sink.put((time.monotonic(), line))
        sink.put((time.monotonic(), _EOF))

    def _drain_stderr(self, stream) -> None:
        for line in stream:
            if len(self._stderr) < 200:
                self._stderr.append(line.rstrip("\n"))

    def _send(self, record: dict) -> float:
        try:
            self.proc.stdin.write(json.dumps(record) + "\n")
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError, ValueError) as exc:
            raise ControllerDied(f"cannot write to controller: {exc}{self._stderr_tail()}") from exc
        return time.monotonic()

    def _stderr_tail(self) -> str:
        return ("; stderr: " + " | ".join(self._stderr[-5:])) if self._stderr else ""

    def _next_line(self, deadline: float):
        """Next line before ``deadline`` or ``None``; raises when the process is gone."""
        remaining = deadline - time.monotonic()
        try:
            stamp, line = self._lines.get(timeout=max(remaining, 0.0)) if remaining > 0 else \
                self._lines.get_nowait()
        except queue.Empty:
            return None
        if line is _EOF:
            code = None
            if self.proc is not None:
                try:
                    code = self.proc.wait(timeout=1.0)
                except subprocess.TimeoutExpired:
                    pass
            raise ControllerDied(f"controller exited (code {code}){self._stderr_tail()}")
        return stamp, line

    def start(self, info: EpisodeInfo) -> None:
        self.events = []
        self.latencies = []
        self._owed = []
        self._stalled = False
        self._p = info.p
        self._last_step = -1
        self._lines = queue.Queue()
        try:
            self.proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE, stderr=subprocess.PIPE,
                text=True, bufsize=1, env=self.env,
            )
        except OSError as exc:
            raise ControllerDied(f"cannot start controller {self.command!r}: {exc}") from exc
        threading.Thread(target=self._reader, args=(self.proc.stdout, self._lines), daemon=True).start()
        threading.Thread(target=self._drain_stderr, args=(self.proc.stderr,), daemon=True).start()
        self._send({"type": "hello", **info.to_dict()})
        deadline = time.monotonic() + self.startup_timeout
        while True:
            got = self._next_line(deadline)
            if got is None:
                raise ControllerDied(f"no ready handshake within {self.startup_timeout:.1f} s")
            try:
                if json.loads(got[1]).get("type") == "ready":
                    return
            except (json.JSONDecodeError, AttributeError):
                pass

    def query(self, step: int, obs: Observation, target) -> np.ndarray | None:
        if step <= self._last_step:
            raise ValueError(f"query steps must increase (got {step} after {self._last_step})")
        self._last_step = step
        sent = self._send(query_record(step, obs, target))
        self._owed.append(step)
        start = sent
        # drain late replies to earlier queries; the clock starts once the client is free
        # a client that already missed one catch-up window is not waited for again
        while self._owed[0] != step:
            got = self._next_line(sent if self._stalled else sent + self.catchup)
            if got is None:
                self._stalled = True
                start = time.monotonic()
                break
            self._stalled = False
            self._owed.pop(0)
            start = max(start, got[0])
        deadline = start + self.budget
        while True:
            got = self._next_line(deadline)
            if got is None:
                self.events.append(StepEvent(step, "timeout", f"budget {self.budget:.3f} s"))
                return None
            stamp, line = got
            owner = self._owed.pop(0) if self._owed else None
            if owner != step:
                # a late reply to an earlier query: discard it and keep waiting
                continue
            self.latencies.append(stamp - start)
            if stamp > deadline:
                self.events.append(StepEvent(step, "timeout", f"reply after {stamp - start:.3f} s"))
                return None
            try:
                rec = json.loads(line)
                U = np.asarray(rec["U"], dtype=float)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                self.events.append(StepEvent(step, "parse", str(exc)[:200]))
                return None
            if "step" in rec and rec["step"] != step:
                self.events.append(StepEvent(step, "step", f"reply for step {rec['step']}"))
                return None
            if U.shape != (self._p,) or not np.all(np.isfinite(U)):
                self.events.append(StepEvent(step, "shape", f"got shape {U.shape}"))
                return None
            return U

    def finish(self) -> None:
        if self.proc is None:
            return
        try:
            self._send({"type": "end"})
            self.proc.stdin.close()
        except (ControllerDied, OSError, ValueError):
            pass
        try:
            self.proc.wait(timeout=2.0)
        except subprocess.TimeoutExpired:
            self.proc.kill()
            self.proc.wait()
        self.proc = None


def python_client(module: str, *args: str) -> list[str]:
    """Command line running ``python -m module args`` with this interpreter."""
    return [sys.executable, "-m", module, *args]


def client_env() -> dict:
    """Environment for client processes: inherit, but keep the package importable."""
    env = dict(os.environ)
    src = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    env["PYTHONPATH"] = src + (os.pathsep + env["PYTHONPATH"] if env.get("PYTHONPATH") else "")
    return env


# ---------------------------------------------------------------------------
# client side helper


def serve(policy_factory, stdin=None, stdout=None) -> None:
    """Run a client loop: ``policy_factory(hello)`` returns ``f(step, obs, target) -> U``.

    Used by the reference clients; participants may implement the wire
    contract in any language.
    """
    stdin = sys.stdin if stdin is None else stdin
    stdout = sys.stdout if stdout is None else stdout
    policy = None
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        rec = json.loads(line)
        kind = rec.get("type")
        if kind == "hello":
            policy = policy_factory(rec)
            stdout.write(json.dumps({"type": "ready"}) + "\n")
            stdout.flush()
        elif kind == "query":
            obs = observation_from_record(rec)
            U = policy(int(rec["step"]), obs, np.asarray(rec["target"], float))
            stdout.write(json.dumps({"step": rec["step"], "U": np.asarray(U, float).tolist()}) + "\n")
            stdout.flush()
        elif kind == "end":
            break
