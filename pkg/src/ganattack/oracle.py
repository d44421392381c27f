"""Black-box detector access.

A detector is anything with ``score(img) -> float`` (optionally a vectorised
``score_many``) or a plain callable.  :class:`ExternalDetector` talks to a
separate process over a line protocol: one absolute image path per line in,
one decimal P_GAN in [0, 1] per line out.
"""

from __future__ import annotations

import os
import queue
import shlex
import subprocess
import tempfile
import threading
from dataclasses import dataclass

import numpy as np


class OracleError(RuntimeError):
    def __init__(self, message: str, reply: str | None = None):
        super().__init__(message if reply is None else f"{message} (reply: {reply!r})")
        self.reply = reply


def score_images(det, images) -> np.ndarray:
    """Scores for a sequence of images, each checked to lie in [0, 1]."""
    if hasattr(det, "score_many"):
        scores = np.asarray(det.score_many(np.asarray(images)), dtype=np.float64)
    else:
        fn = det.score if hasattr(det, "score") else det
        scores = np.array([float(fn(img)) for img in images], dtype=np.float64)
    if scores.shape != (len(images),):
        raise OracleError(f"detector returned {scores.shape} scores for {len(images)} images")
    if np.isnan(scores).any() or (scores < 0).any() or (scores > 1).any():
        raise OracleError("detector score outside [0, 1]")
    return scores


@dataclass
class ExternalDetectorConfig:
    command: list[str] | str
    timeout: float = 30.0
    batch: bool = True

    def __post_init__(self):
        if isinstance(self.command, str):
            self.command = shlex.split(self.command)
        if not self.command:
            raise ValueError("detector command is empty")

    @classmethod
    def from_dict(cls, d: dict) -> "ExternalDetectorConfig":
        unknown = set(d) - {"command", "timeout", "batch"}
        if unknown:
            raise ValueError(f"unknown detector config fields: {sorted(unknown)}")
        return cls(**d)


def parse_reply(line: str) -> float:
    text = line.strip()
    try:
        value = float(text)
    except ValueError:
        raise OracleError("non-numeric detector reply", line) from None
    if not 0.0 <= value <= 1.0:
        raise OracleError("detector reply out of range [0, 1]", line)
    return value


class ExternalDetector:
    """Subprocess-backed detector oracle.

    In batch mode one process stays resident and calls are serialised;
    otherwise a fresh process is launched per image.
    """

    name = "external"

    def __init__(self, cfg: ExternalDetectorConfig, name: str | None = None):
        self.cfg = cfg
        if name:
            self.name = name
        self._proc: subprocess.Popen | None = None
        self._lines: queue.Queue | None = None
        self._lock = threading.Lock()

    # -- process management
    def _start(self) -> None:
        self._proc = subprocess.Popen(self.cfg.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                      text=True, bufsize=1)
        self._lines = queue.Queue()
        threading.Thread(target=self._pump, args=(self._proc.stdout, self._lines), daemon=True).start()

    @staticmethod
    def _pump(stream, q: queue.Queue) -> None:
        for line in stream:
            q.put(line)
        q.put(None)

    def close(self) -> None:
        if self._proc is None:
            return
        try:
            self._proc.stdin.close()
            self._proc.wait(timeout=self.cfg.timeout)
        except (OSError, subprocess.TimeoutExpired):
            self._proc.kill()
            self._proc.wait()
        self._proc = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:  # noqa: BLE001 - interpreter shutdown
            pass

    # -- scoring
    def score_path(self, path) -> float:
        path = os.path.abspath(path)
        if not self.cfg.batch:
            return self._single_shot(path)
        with self._lock:
            if self._proc is None or self._proc.poll() is not None:
                self._start()
            try:
                self._proc.stdin.write(path + "\n")
                self._proc.stdin.flush()
            except OSError as exc:
                raise OracleError(f"detector process unavailable: {exc}") from None
            try:
                line = self._lines.get(timeout=self.cfg.timeout)
            except queue.Empty:
                self._proc.kill()
                self._proc = None
                raise OracleError(f"detector timed out after {self.cfg.timeout}s") from None
            if line is None:
                self._proc = None
                raise OracleError("detector process exited")
            return parse_reply(line)

    def _single_shot(self, path: str) -> float:
        try:
            done = subprocess.run(self.cfg.command, input=path + "\n", capture_output=True, text=True,
                                  timeout=self.cfg.timeout)
        except subprocess.TimeoutExpired:
            raise OracleError(f"detector timed out after {self.cfg.timeout}s") from None
        lines = done.stdout.splitlines()
        if not lines:
            raise OracleError("detector produced no output", done.stdout)
        return parse_reply(lines[0])

    def score(self, img: np.ndarray) -> float:
        from .imageio import write_image

        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "query.ppm")
            write_image(img, path)
            return self.score_path(path)


def external_detector_score(cfg: ExternalDetectorConfig, image_path) -> float:
    """One-off score of an image file with a fresh detector process."""
    return ExternalDetector(ExternalDetectorConfig(cfg.command, cfg.timeout, batch=False)).score_path(image_path)
