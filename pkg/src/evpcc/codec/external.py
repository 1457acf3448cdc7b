"""Run third-party point cloud codecs through command templates.

A template is ``"<encode cmd>;<decode cmd>"``. Placeholders ``{in}``,
``{bin}`` and ``{out}`` are replaced by the input PLY, the compressed file and
the decoded PLY; extra placeholders (e.g. ``{param}``) come from keyword
arguments. Commands are tokenized with shlex and run without a shell.
"""

from __future__ import annotations

import shlex
import subprocess
from dataclasses import dataclass
from pathlib import Path

from ..pc_model import PlyFormatError, read_ply


class ExternalCodecError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExternalCodec:
    encode_cmd: str
    decode_cmd: str

    @classmethod
    def parse(cls, template: str) -> "ExternalCodec":
        parts = template.split(";")
        if len(parts) != 2 or not all(p.strip() for p in parts):
            raise ValueError("external codec template must be '<encode cmd>;<decode cmd>'")
        enc, dec = (p.strip() for p in parts)
        for name in ("{in}", "{bin}"):
            if name not in enc:
                raise ValueError(f"encode command lacks {name}")
        for name in ("{bin}", "{out}"):
            if name not in dec:
                raise ValueError(f"decode command lacks {name}")
        return cls(enc, dec)

    @property
    def template(self) -> str:
        return f"{self.encode_cmd};{self.decode_cmd}"


def _render(cmd: str, values: dict) -> list:
    try:
        return [tok.format(**values) for tok in shlex.split(cmd)]
    except KeyError as exc:
        raise ValueError(f"unbound placeholder {exc} in command {cmd!r}") from None


def _run(argv: list, timeout):
    try:
        proc = subprocess.run(argv, capture_output=True, text=True, timeout=timeout)
    except FileNotFoundError as exc:
        raise ExternalCodecError(f"command not found: {shlex.join(argv)}") from exc
    except subprocess.TimeoutExpired as exc:
        raise ExternalCodecError(f"command timed out: {shlex.join(argv)}") from exc
    if proc.returncode != 0:
        raise ExternalCodecError(
            f"command exited with {proc.returncode}: {shlex.join(argv)}\n"
            f"stdout:\n{proc.stdout}\nstderr:\n{proc.stderr}"
        )
    return proc


def run_external_codec(codec, in_ply, workdir, polarity=None, timeout=None, **params):
    """Encode and decode ``in_ply``; return (decoded cloud, compressed bytes)."""
    if isinstance(codec, str):
        codec = ExternalCodec.parse(codec)
    in_ply = Path(in_ply)
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    stem = in_ply.name[:-4] if in_ply.name.endswith(".ply") else in_ply.name
    values = {"in": str(in_ply), "bin": str(workdir / f"{stem}.bin"),
              "out": str(workdir / f"{stem}.dec.ply"), **params}
    _run(_render(codec.encode_cmd, values), timeout)
    bin_path = Path(values["bin"])
    if not bin_path.is_file():
        raise ExternalCodecError(f"encoder produced no bitstream at {bin_path}")
    size = bin_path.stat().st_size
    proc = _run(_render(codec.decode_cmd, values), timeout)
    out_path = Path(values["out"])
    if not out_path.is_file():
        raise ExternalCodecError(f"decoder produced no output at {out_path}\n{proc.stderr}")
    try:
        pc = read_ply(out_path.read_bytes(), polarity)
    except (PlyFormatError, ValueError, UnicodeDecodeError) as exc:
        raise ExternalCodecError(f"cannot parse decoded PLY {out_path}: {exc}") from exc
    return pc, size
