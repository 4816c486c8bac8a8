"""Line-delimited ``key=value`` records.

One record per line, fields separated by single spaces, floats written with
``repr`` so a record round-trips exactly and identical runs give identical
bytes.  List values are comma-joined.
"""
import numpy as np


def _fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (list, tuple, np.ndarray)):
        return ",".join(_fmt(v) for v in value)
    text = str(value)
    if any(ch.isspace() for ch in text) or "=" in text:
        raise ValueError(f"value {text!r} cannot contain whitespace or '='")
    return text


def format_record(fields):
    for key in fields:
        if not key or any(ch.isspace() for ch in key) or "=" in key:
            raise ValueError(f"bad key {key!r}")
    return " ".join(f"{k}={_fmt(v)}" for k, v in fields.items())


def _parse_scalar(text):
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def parse_record(line):
    out = {}
    for token in line.split():
        key, sep, value = token.partition("=")
        if not sep:
            raise ValueError(f"malformed field {token!r}")
        if "," in value:
            out[key] = [_parse_scalar(v) for v in value.split(",")]
        else:
            out[key] = _parse_scalar(value)
    return out


def read_log(path):
    with open(path, encoding="utf-8") as fh:
        return [parse_record(line) for line in fh if line.strip()]
