"""Run configuration: INI files with typed, line-anchored validation.

A config is a set of ``[section]`` blocks with ``key = value`` lines.
Every value is validated against :data:`SCHEMA`; errors name the file,
line, section and key.  Command-line overrides are applied on top and are
anchored to the flag that set them.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .construction import ConstructionParams, Family
from .errors import ParameterError
from .levels import StageTime, as_time

__all__ = ["ConfigError", "BasisSpec", "RunConfig", "SCHEMA", "load_config", "parse_times"]


class ConfigError(ParameterError):
    """Invalid configuration; ``str()`` gives ``origin:line: [section] key: message``."""

    def __init__(self, message, origin="<config>", line=None, section=None, key=None):
        self.origin, self.line, self.section, self.key = origin, line, section, key
        where = origin if line is None else f"{origin}:{line}"
        field_name = "" if section is None else f"[{section}] " + (f"{key}: " if key else "")
        super().__init__(f"{where}: {field_name}{message}")


# section -> key -> default (as text); the parser below fixes each type
SCHEMA = {
    "construction": {"family": "FEps", "eps": "0.5", "h1": "1.0", "max_stage": "40", "eps_schedule": ""},
    "basis": {"kind": "slabs", "size": "16", "stage": "3", "strips": ""},
    "run": {"seed": "0", "workers": "1"},
    "output": {"dir": "", "plot": "false"},
    "correlate": {"times": "0, 0.5, 1, h10"},
    "weaklimit": {"times": "feasible", "dictionary": "Theta, Id", "a": "1.0"},
    "lemma": {"a": "1.0", "j": "", "step": "", "eps": ""},
    "spectrum": {"T": "1024", "dt": "0.25", "window": "blackman", "pad": "4", "coefficients": "random"},
    "multiplicity": {"times": "default", "tol": "1e-6", "budget": ""},
    "decay": {"times": "feasible"},
}

_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^([^\s=:#;][^=:]*?)\s*[=:]")


def _line_map(text):
    # (section, key) -> 1-based line of the key, section -> line of the header
    lines, section = {}, None
    for n, raw in enumerate(text.splitlines(), start=1):
        m = _SECTION_RE.match(raw)
        if m:
            section = m.group(1).strip()
            lines.setdefault((section, None), n)
            continue
        m = _KEY_RE.match(raw)
        if m and section is not None:
            lines[(section, m.group(1).strip().lower())] = n
    return lines


@dataclass(frozen=True)
class BasisSpec:
    """Named preset (``slabs``: equal full-width slabs) or explicit strips at one stage."""

    kind: str = "slabs"
    size: int = 16
    stage: int = 3
    strips: tuple = ()

    def as_dict(self):
        d = {"kind": self.kind, "stage": self.stage}
        if self.kind == "slabs":
            d["size"] = self.size
        else:
            d["strips"] = [list(s) for s in self.strips]
        return d


def parse_times(text, stages=None):
    """Comma-separated times; ``hA..hB`` expands to ``h_A, ..., h_B``."""
    out = []
    for token in (t.strip() for t in str(text).split(",")):
        if not token:
            continue
        m = re.fullmatch(r"h(\d+)\s*\.\.\s*h(\d+)", token)
        if m:
            a, b = int(m.group(1)), int(m.group(2))
            if b < a:
                raise ParameterError(f"time range {token!r} is empty")
            out.extend(StageTime(j) for j in range(a, b + 1))
            continue
        try:
            out.append(as_time(float(token)) if _is_float(token) else as_time(token))
        except ParameterError:
            raise ParameterError(f"cannot parse time {token!r}") from None
    if not out:
        raise ParameterError("expected at least one time")
    return out


def _is_float(token):
    try:
        float(token)
    except ValueError:
        return False
    return True


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration.  ``values`` holds the effective text of every key."""

    values: dict
    origin: str = "<defaults>"
    lines: dict = field(default_factory=dict, repr=False)
    anchors: dict = field(default_factory=dict, repr=False)

    def error(self, section, key, message):
        anchor = self.anchors.get((section, key))
        if anchor is not None:
            return ConfigError(message, origin=anchor, section=section, key=key)
        return ConfigError(message, self.origin, self.lines.get((section, key)), section, key)

    def text(self, section, key):
        return self.values[section][key].strip()

    def get(self, section, key, kind=str, optional=False):
        raw = self.text(section, key)
        if raw == "" and optional:
            return None
        try:
            if kind is bool:
                low = raw.lower()
                if low not in ("true", "false", "yes", "no", "on", "off", "1", "0"):
                    raise ValueError
                return low in ("true", "yes", "on", "1")
            if kind is int:
                value = float(raw)
                if value != int(value):
                    raise ValueError
                return int(value)
            return kind(raw)
        except (TypeError, ValueError):
            name = {int: "an integer", float: "a real number", bool: "true or false"}.get(kind, "a value")
            raise self.error(section, key, f"expected {name}, got {raw!r}") from None

    def checked(self, section, key, fn):
        """Run ``fn`` and re-raise parameter errors anchored at ``section.key``."""
        try:
            return fn()
        except ConfigError:
            raise
        except ParameterError as exc:
            msg = str(exc)
            prefix = f"{key}: "
            raise self.error(section, key, msg[len(prefix) :] if msg.startswith(prefix) else msg) from None

    @property
    def construction(self) -> ConstructionParams:
        family = self.checked("construction", "family", lambda: Family.parse(self.text("construction", "family")))
        schedule = self.checked("construction", "eps_schedule", self._schedule)
        kwargs = dict(
            family=family,
            h1=self.get("construction", "h1", float),
            max_stage=self.get("construction", "max_stage", int),
        )
        if family is Family.FEPS:
            kwargs["eps"] = self.get("construction", "eps", float)
        if family is Family.SLOW_MIX and schedule:
            kwargs["eps_schedule"] = schedule
        key_of = {"eps": "eps", "h1": "h1", "max_stage": "max_stage", "eps_schedule": "eps_schedule"}
        try:
            return ConstructionParams(**kwargs)
        except ParameterError as exc:
            key = str(exc).split(":", 1)[0].split("[", 1)[0]
            key = key_of.get(key, "family")
            raise self.error("construction", key, str(exc).split(": ", 1)[-1]) from None

    def _schedule(self):
        raw = self.text("construction", "eps_schedule")
        if not raw:
            return ()
        blocks = []
        for part in raw.split(","):
            try:
                length, value = part.split(":")
                blocks.append((int(length), float(value)))
            except ValueError:
                raise ParameterError(f"expected 'length:value' blocks, got {part.strip()!r}") from None
        return tuple(blocks)

    @property
    def basis(self) -> BasisSpec:
        kind = self.text("basis", "kind").lower()
        if kind not in ("slabs", "strips"):
            raise self.error("basis", "kind", f"expected slabs or strips, got {kind!r}")
        stage = self.get("basis", "stage", int)
        if stage < 1:
            raise self.error("basis", "stage", f"expected a stage >= 1, got {stage}")
        size = self.get("basis", "size", int)
        if size < 1:
            raise self.error("basis", "size", f"expected a positive size, got {size}")
        strips = ()
        if kind == "strips":
            raw = self.text("basis", "strips")
            try:
                strips = tuple(tuple(float(v) for v in part.split()) for part in raw.split(";") if part.strip())
            except ValueError:
                raise self.error("basis", "strips", "expected 'x0 x1 y0 y1' groups separated by ';'") from None
            if not strips or any(len(s) != 4 for s in strips):
                raise self.error("basis", "strips", "expected 'x0 x1 y0 y1' groups separated by ';'")
        return BasisSpec(kind, size, stage, strips)

    def times(self, section, key="times", stages=None):
        return self.checked(section, key, lambda: parse_times(self.text(section, key), stages))

    def as_dict(self):
        return {s: dict(sorted(kv.items())) for s, kv in sorted(self.values.items())}

    def digest(self, command):
        """SHA-256 of the effective configuration and command.

        The ``[output]`` section is left out: where results go and whether
        plots are drawn does not change the experiment.
        """
        config = {s: kv for s, kv in self.as_dict().items() if s != "output"}
        payload = json.dumps({"command": command, "config": config}, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()

    def with_overrides(self, overrides):
        """Apply ``(section, key, value, anchor)`` overrides; unknown keys are errors."""
        values = {s: dict(kv) for s, kv in self.values.items()}
        anchors = dict(self.anchors)
        for section, key, value, anchor in overrides:
            if section not in SCHEMA or key not in SCHEMA[section]:
                raise ConfigError("unknown setting", origin=anchor, section=section, key=key)
            values[section][key] = str(value)
            anchors[(section, key)] = anchor
        return RunConfig(values, self.origin, self.lines, anchors)


def _defaults():
    return {s: dict(kv) for s, kv in SCHEMA.items()}


def load_config(path=None, text=None) -> RunConfig:
    """Read and structurally validate an INI config (``None`` gives all defaults)."""
    if path is None and text is None:
        return RunConfig(_defaults())
    origin = "<string>" if path is None else str(path)
    if text is None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc.strerror}", origin=origin) from None
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=origin)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        if line is None and getattr(exc, "errors", None):
            line = exc.errors[0][0]
        message = exc.message.splitlines()[0] if hasattr(exc, "message") else str(exc)
        raise ConfigError(f"syntax error: {message}", origin=origin, line=line) from None
    lines = _line_map(text)
    values = _defaults()
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", origin, lines.get((section, None)))
        for key, value in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError("unknown key", origin, lines.get((section, key.lower())), section, key)
            values[section][key] = value
    # anchor lines by the original key spelling
    keyed = {(s, k): lines.get((s, k.lower())) for s in SCHEMA for k in SCHEMA[s]}
    return RunConfig(values, origin, {k: v for k, v in keyed.items() if v is not None})
