"""Series files, model specification files and run manifests."""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import os
from importlib import metadata
from pathlib import Path

import numpy as np

from .bar_model import BarParams, BoundedSeries, SegmentedModel
from .errors import InvalidSeries, ParseError

__all__ = [
    "parse_series",
    "read_series",
    "format_series",
    "load_model_spec",
    "library_version",
    "sha256_bytes",
    "make_manifest",
    "dump_json",
]


def _parse_int(token: str, line: int) -> int:
    token = token.strip()
    try:
        value = int(token)
    except ValueError:
        try:
            f = float(token)
        except ValueError:
            raise ParseError(f"not an integer: {token!r}", line) from None
        if not f.is_integer():
            raise ParseError(f"not an integer: {token!r}", line) from None
        value = int(f)
    if value < 0:
        raise ParseError(f"negative count {value}", line)
    return value


def parse_series(text: str) -> list[int]:
    """Counts from one-per-line text or a two-column ``t,count`` CSV.

    Blank lines and lines starting with ``#`` are ignored.  In CSV mode a
    non-numeric first row is taken as a header.
    """
    rows = [
        (i, raw.strip())
        for i, raw in enumerate(text.splitlines(), start=1)
        if raw.strip() and not raw.lstrip().startswith("#")
    ]
    if not rows:
        raise ParseError("no observations found")
    csv_mode = "," in rows[0][1]
    values = []
    for pos, (line, content) in enumerate(rows):
        if csv_mode:
            fields = [f.strip() for f in content.split(",")]
            if len(fields) != 2:
                raise ParseError(f"expected 2 comma-separated fields, got {len(fields)}", line)
            if pos == 0 and not fields[1].lstrip("-").replace(".", "", 1).isdigit():
                continue
            values.append(_parse_int(fields[1], line))
        else:
            if "," in content:
                raise ParseError("unexpected comma in single-column file", line)
            values.append(_parse_int(content, line))
    return values


def read_series(path: str | os.PathLike, upper_bound: int | None = None):
    """Load a series file.

    Returns ``(series, raw_bytes, inferred)`` where ``inferred`` tells
    whether ``N`` was taken from the observed maximum.
    """
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"file is not UTF-8: {exc}") from None
    values = parse_series(text)
    inferred = upper_bound is None
    N = max(values) if inferred else upper_bound
    if N < 1:
        raise InvalidSeries("upper bound must be at least 1 (all counts are zero)")
    return BoundedSeries(np.array(values, dtype=np.int64), int(N)), raw, inferred


def format_series(series: BoundedSeries) -> str:
    return "".join(f"{int(v)}\n" for v in series.counts)


def load_model_spec(path: str | os.PathLike) -> tuple[SegmentedModel, int | None]:
    """Read a JSON segmented-model file.

    Layout: ``{"upper_bound": 10, "n": 500, "change_points": [150, 350],
    "segments": [{"p": 0.3, "rho": 0.2}, ...]}``; ``n`` is optional.
    """
    try:
        spec = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.lineno) from None
    try:
        segs = tuple(BarParams(float(s["p"]), float(s["rho"])) for s in spec["segments"])
        model = SegmentedModel(int(spec["upper_bound"]), tuple(spec.get("change_points", ())), segs)
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed model spec: missing or invalid {exc}") from None
    n = spec.get("n")
    return model, (int(n) if n is not None else None)


def library_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _now() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is not None:
        moment = _dt.datetime.fromtimestamp(int(epoch), tz=_dt.timezone.utc)
    else:
        moment = _dt.datetime.now(tz=_dt.timezone.utc)
    return moment.isoformat(timespec="seconds")


def make_manifest(command: str, config: dict, seed, input_sha256: str | None, started: str) -> dict:
    """Run record embedded in every output.

    Timestamps honour ``SOURCE_DATE_EPOCH`` so seeded runs can be made
    byte-identical.
    """
    return {
        "command": command,
        "config": config,
        "seed": seed,
        "version": library_version(),
        "input_sha256": input_sha256,
        "started": started,
        "finished": _now(),
    }


def now() -> str:
    return _now()


def _default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_default, allow_nan=False) + "\n"
