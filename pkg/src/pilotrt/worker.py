"""Persistent pool worker: reads task frames on stdin, answers on stdout.

Frames are a 4-byte big-endian length followed by UTF-8 text. Requests are
``uid\\tkind\\targs-csv``; responses are ``uid\\tOK|ERR\\tdetail``. A hello
frame with uid ``-`` is sent once at startup. Kept free of heavy imports so
workers start quickly.
"""

from __future__ import annotations

import os
import struct
import subprocess
import sys
import time

_LEN = struct.Struct(">I")


def write_frame(fh, text: str) -> None:
    data = text.encode("utf-8")
    fh.write(_LEN.pack(len(data)) + data)
    fh.flush()


def read_exact(fh, n: int) -> bytes | None:
    buf = b""
    while len(buf) < n:
        chunk = fh.read(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


def read_frame(fh) -> str | None:
    head = read_exact(fh, _LEN.size)
    if head is None:
        return None
    (n,) = _LEN.unpack(head)
    body = read_exact(fh, n)
    return None if body is None else body.decode("utf-8")


def encode_request(uid: str, kind: str, args) -> str:
    return f"{uid}\t{kind}\t{','.join(args)}"


def decode_response(text: str) -> tuple[str, str, str]:
    uid, status, detail = text.split("\t", 2)
    if status not in ("OK", "ERR"):
        raise ValueError(f"bad status {status!r}")
    return uid, status, detail


def execute(kind: str, args: list[str]) -> tuple[str, str, int]:
    """Run one task in-process; returns (status, message, children spawned)."""
    if kind == "noop":
        return "OK", "", 0
    if kind == "sleep":
        time.sleep(float(args[0]) if args else 0.0)
        return "OK", "", 0
    if kind == "fail":
        return "ERR", args[0] if args else "fail", 0
    if kind == "exec":
        rc = subprocess.run(args, stdin=subprocess.DEVNULL).returncode
        return ("OK" if rc == 0 else "ERR"), f"rc={rc}", 1
    return "ERR", f"unknown kind {kind}", 0


def serve(stdin=None, stdout=None) -> int:
    stdin = stdin or sys.stdin.buffer
    stdout = stdout or sys.stdout.buffer
    pid = os.getpid()
    write_frame(stdout, f"-\tOK\tready pid={pid}")
    while True:
        frame = read_frame(stdin)
        if frame is None:
            return 0
        try:
            uid, kind, rest = frame.split("\t", 2)
            args = rest.split(",") if rest else []
        except ValueError:
            write_frame(stdout, f"-\tERR\tmalformed request pid={pid}")
            continue
        try:
            status, msg, spawned = execute(kind, args)
        except Exception as exc:  # report, keep serving
            status, msg, spawned = "ERR", f"{type(exc).__name__}: {exc}", 0
        detail = f"pid={pid} spawned={spawned}" + (f" {msg}" if msg else "")
        write_frame(stdout, f"{uid}\t{status}\t{detail}")


if __name__ == "__main__":
    sys.exit(serve())
