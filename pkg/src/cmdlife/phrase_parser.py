"""Rule-based parsing of transcribed controller utterances.

Keyword groups, spoken digits and phonetic letters live in ``data/*.json`` so
the rule set can be edited without touching code.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from typing import Iterable, Sequence

from .errors import MissingValue, NoCallsign, NotACommand, ValidationError, WrongSpeaker


def _load_json(name: str) -> dict:
    return json.loads(resources.files("cmdlife").joinpath("data", name).read_text())


_KEYWORDS = _load_json("keywords.json")
_PHONETIC = _load_json("phonetic.json")

DIGITS: dict[str, int] = _PHONETIC["digits"]
MULTIPLIERS: dict[str, int] = _PHONETIC["multipliers"]
LETTERS: dict[str, str] = _PHONETIC["letters"]
CANONICAL_DIGITS: list[str] = _PHONETIC["canonical_digits"]
CANONICAL_LETTERS = {v: k for k, v in reversed(list(LETTERS.items()))}
CONDITIONAL_TOKENS = frozenset(_KEYWORDS["conditional"])

_BARE_ICAO = re.compile(r"^([a-z]{3})(\d{1,4})([a-z]{0,2})$")
_NUMERIC = re.compile(r"^\d+$")


class CommandType(str, Enum):
    ALTITUDE = "altitude"
    SPEED = "speed"
    HEADING = "heading"


class Direction(str, Enum):
    LEFT = "left"
    RIGHT = "right"
    NONE = "none"


VALUE_RANGES = {
    CommandType.ALTITUDE: (0, 60000),
    CommandType.SPEED: (80, 600),
    CommandType.HEADING: (0, 359),
}


@dataclass(frozen=True)
class TranscriptUtterance:
    start_t: float
    duration_s: float
    speaker: str
    text: str

    def __post_init__(self):
        if not self.duration_s > 0:
            raise ValidationError(f"utterance at {self.start_t}: duration must be positive")
        if self.speaker not in ("atco", "pilot", "unknown"):
            raise ValidationError(f"unknown speaker label {self.speaker!r}")

    @property
    def tokens(self) -> list[str]:
        return tokenize(self.text)


@dataclass(frozen=True)
class ParsedCommand:
    callsign: str
    ctype: CommandType
    value: int | None
    direction: Direction = Direction.NONE
    start_t: float = 0.0
    duration_s: float = 0.0
    flags: frozenset = field(default_factory=frozenset)

    @property
    def end_t(self) -> float:
        return self.start_t + self.duration_s

    @property
    def excluded(self) -> bool:
        return bool(self.flags)

    def to_dict(self) -> dict:
        return {
            "callsign": self.callsign,
            "ctype": CommandType(self.ctype).value,
            "value": self.value,
            "direction": Direction(self.direction).value,
            "start_t": self.start_t,
            "duration_s": self.duration_s,
            "flags": sorted(self.flags),
            "excluded": self.excluded,
            "reason": ",".join(sorted(self.flags)) or None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParsedCommand":
        return cls(
            callsign=d["callsign"],
            ctype=CommandType(d["ctype"]),
            value=None if d["value"] is None else int(d["value"]),
            direction=Direction(d.get("direction", "none")),
            start_t=float(d["start_t"]),
            duration_s=float(d["duration_s"]),
            flags=frozenset(d.get("flags", ())),
        )


class CallsignTable:
    """Spoken airline alias (one or more words) -> ICAO three-letter code."""

    def __init__(self, mapping: dict[str, str]):
        self._by_alias: dict[tuple[str, ...], str] = {}
        for alias, code in mapping.items():
            key = tuple(tokenize(alias))
            if not key:
                raise ValidationError("empty airline alias")
            if key in self._by_alias:
                raise ValidationError(f"duplicate alias {alias!r}")
            if not re.fullmatch(r"[A-Z]{3}", code):
                raise ValidationError(f"bad ICAO code {code!r} for alias {alias!r}")
            self._by_alias[key] = code
        self.max_words = max((len(k) for k in self._by_alias), default=0)
        self._alias_of: dict[str, tuple[str, ...]] = {}
        for key, code in self._by_alias.items():
            self._alias_of.setdefault(code, key)

    def __len__(self):
        return len(self._by_alias)

    def lookup(self, words: Sequence[str]) -> str | None:
        return self._by_alias.get(tuple(words))

    def alias_for(self, code: str) -> tuple[str, ...] | None:
        return self._alias_of.get(code)

    def to_dict(self) -> dict[str, str]:
        return {" ".join(k): v for k, v in self._by_alias.items()}

    @classmethod
    def from_csv(cls, path) -> "CallsignTable":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["alias", "icao"]:
                raise ValidationError(f"{path}: expected header alias,icao")
            return cls({r["alias"]: r["icao"] for r in reader})

    @classmethod
    def default(cls) -> "CallsignTable":
        with resources.as_file(resources.files("cmdlife").joinpath("data", "callsigns.csv")) as p:
            return cls.from_csv(p)


@dataclass
class KeywordGroups:
    """Command keyword groups; multi-word keywords are matched as n-grams."""

    groups: dict[str, list[str]] = field(default_factory=lambda: {k: list(v) for k, v in _KEYWORDS["groups"].items()})
    maintain_is_altitude: bool = True

    def __post_init__(self):
        self._index: dict[tuple[str, ...], CommandType] = {}
        for g, words in self.groups.items():
            for w in words:
                if w == "maintain" and not self.maintain_is_altitude:
                    continue
                self._index[tuple(w.split())] = CommandType(g)
        self._max_n = max(len(k) for k in self._index)

    def scan(self, tokens: Sequence[str]) -> list[tuple[int, int, CommandType]]:
        """All keyword hits as (position, n_words, group), left to right, longest match first."""
        hits = []
        i = 0
        while i < len(tokens):
            for n in range(min(self._max_n, len(tokens) - i), 0, -1):
                g = self._index.get(tuple(tokens[i:i + n]))
                if g is not None:
                    hits.append((i, n, g))
                    i += n
                    break
            else:
                i += 1
        return hits


DEFAULT_KEYWORDS = KeywordGroups()


def tokenize(text: str) -> list[str]:
    return re.sub(r"[^a-z0-9\s]", " ", text.lower()).split()


def _is_number_token(tok: str) -> bool:
    return tok in DIGITS or bool(_NUMERIC.match(tok))


def parse_number(tokens: Sequence[str], start: int) -> tuple[int, int] | None:
    """Parse a spoken number beginning at ``start``.

    Digit words concatenate ("one eight zero" -> 180); ``thousand`` and
    ``hundred`` scale the digits before them ("one zero thousand five
    hundred" -> 10500).  Returns ``(value, end_index)`` or None.
    """
    i = start
    total = 0
    buf = ""
    seen = False
    while i < len(tokens):
        tok = tokens[i]
        if tok in DIGITS:
            buf += str(DIGITS[tok])
        elif _NUMERIC.match(tok):
            buf += tok
        elif tok in MULTIPLIERS and buf:
            total += int(buf) * MULTIPLIERS[tok]
            buf = ""
        else:
            break
        seen = True
        i += 1
    if not seen:
        return None
    if buf:
        total += int(buf)
    return total, i


def parse_callsign(tokens: Sequence[str], table: CallsignTable) -> tuple[str, list[str]]:
    """Consume a leading callsign; returns the ICAO identifier and the unconsumed tail."""
    toks = list(tokens)
    if not toks:
        raise NoCallsign("empty utterance")
    code = None
    i = 0
    for n in range(min(table.max_words, len(toks)), 0, -1):
        code = table.lookup(toks[:n])
        if code is not None:
            i = n
            break
    if code is None:
        m = _BARE_ICAO.match(toks[0])
        if m:
            ident = (m.group(1) + m.group(2) + m.group(3)).upper()
            i = 1
            while i < len(toks) and toks[i] in LETTERS and len(ident) < 9:
                ident += LETTERS[toks[i]]
                i += 1
            return ident, toks[i:]
        if len(toks) > 1 and re.fullmatch(r"[a-z]{3}", toks[0]) and _is_number_token(toks[1]):
            code, i = toks[0].upper(), 1
        else:
            raise NoCallsign(f"no callsign in {' '.join(toks[:4])!r}")
    digits = ""
    while i < len(toks) and _is_number_token(toks[i]) and len(digits) < 4:
        digits += str(DIGITS[toks[i]]) if toks[i] in DIGITS else toks[i]
        i += 1
    if not digits:
        raise NoCallsign(f"airline {code} without flight number")
    suffix = ""
    while i < len(toks) and toks[i] in LETTERS and len(suffix) < 2:
        suffix += LETTERS[toks[i]]
        i += 1
    return f"{code}{int(digits)}{suffix}", toks[i:]


def command_flags(tokens: Sequence[str], keywords: KeywordGroups = DEFAULT_KEYWORDS) -> frozenset:
    flags = set()
    if CONDITIONAL_TOKENS.intersection(tokens):
        flags.add("conditional")
    if len({g for _, _, g in keywords.scan(tokens)}) >= 2:
        flags.add("compound")
    return frozenset(flags)


def _find_value(tail: list[str], kw_pos: int) -> tuple[int, bool] | None:
    """First number after the keyword (else anywhere); flags a preceding 'flight level'."""
    for lo in (kw_pos, 0):
        for j in range(lo, len(tail)):
            if _is_number_token(tail[j]):
                parsed = parse_number(tail, j)
                if parsed is not None:
                    fl = j >= 2 and tail[j - 2:j] == ["flight", "level"]
                    return parsed[0], fl
    return None


def parse_utterance(
    u: TranscriptUtterance,
    table: CallsignTable,
    keywords: KeywordGroups = DEFAULT_KEYWORDS,
) -> ParsedCommand:
    """Turn one controller utterance into a command.

    Raises exactly one of WrongSpeaker, NoCallsign, NotACommand or
    MissingValue otherwise.  A value outside the type's valid range counts as
    missing.  Conditional or compound utterances are returned flagged and may
    carry ``value=None``; they never reach a dataset.
    """
    if u.speaker != "atco":
        raise WrongSpeaker(f"speaker is {u.speaker}")
    callsign, tail = parse_callsign(u.tokens, table)
    hits = keywords.scan(tail)
    if not hits:
        raise NotACommand(f"{callsign}: no command keyword")
    kw_pos, _, ctype = hits[0]
    flags = command_flags(tail, keywords)

    found = _find_value(tail, kw_pos)
    value = None
    if found is not None:
        value, is_fl = found
        if ctype is CommandType.ALTITUDE and is_fl:
            value *= 100
        if ctype is CommandType.HEADING and value == 360:
            value = 0
        lo, hi = VALUE_RANGES[ctype]
        if not lo <= value <= hi:
            value = None
    if value is None and not flags:
        raise MissingValue(f"{callsign}: {ctype.value} command without a valid value")

    direction = Direction.NONE
    if ctype is CommandType.HEADING:
        for tok in tail:
            if tok in _KEYWORDS["directions"]:
                direction = Direction(_KEYWORDS["directions"][tok])
                break
    return ParsedCommand(callsign, ctype, value, direction, float(u.start_t), float(u.duration_s), flags)


def filter_commands(cmds: Iterable[ParsedCommand]) -> tuple[list[ParsedCommand], list[ParsedCommand]]:
    """Split into (kept, excluded); flagged commands are excluded, order preserved."""
    kept, excluded = [], []
    for c in cmds:
        (excluded if c.flags else kept).append(c)
    return kept, excluded


def parse_transcript(
    utterances: Iterable[TranscriptUtterance],
    table: CallsignTable,
    keywords: KeywordGroups = DEFAULT_KEYWORDS,
) -> tuple[list[ParsedCommand], list[tuple[TranscriptUtterance, str]]]:
    """Parse every utterance; returns commands and (utterance, error name) rejects."""
    cmds, rejects = [], []
    for u in utterances:
        try:
            cmds.append(parse_utterance(u, table, keywords))
        except (WrongSpeaker, NoCallsign, NotACommand, MissingValue) as exc:
            rejects.append((u, type(exc).__name__))
    return cmds, rejects


# ----------------------------------------------------------------------------
# canonical rendering (used by the generator and the round-trip tests)


def spell_digits(n: int, width: int = 0) -> list[str]:
    return [CANONICAL_DIGITS[int(ch)] for ch in str(n).zfill(width)]


def render_callsign(ident: str, table: CallsignTable) -> list[str]:
    m = re.fullmatch(r"([A-Z]{3})(\d{1,4})([A-Z]{0,2})", ident)
    if not m:
        raise ValidationError(f"cannot render callsign {ident!r}")
    alias = table.alias_for(m.group(1))
    if alias is None:
        return [ident.lower()]
    return list(alias) + spell_digits(int(m.group(2))) + [CANONICAL_LETTERS[c] for c in m.group(3)]


def render_altitude(value: int) -> list[str]:
    if value >= 10000 and value % 100 == 0:
        return ["flight", "level"] + spell_digits(value // 100, 3)
    if value % 100 != 0:
        return spell_digits(value)
    words = []
    thousands, hundreds = divmod(value // 100, 10)
    if thousands:
        words += spell_digits(thousands) + ["thousand"]
    if hundreds or not thousands:
        words += spell_digits(hundreds) + ["hundred"]
    return words


def render_command(cmd: ParsedCommand, table: CallsignTable, verb: str | None = None) -> str:
    """Canonical phraseology for a clean command."""
    if cmd.value is None:
        raise ValidationError("cannot render a command without value")
    words = render_callsign(cmd.callsign, table)
    ctype = CommandType(cmd.ctype)
    if ctype is CommandType.ALTITUDE:
        alt = render_altitude(cmd.value)
        v = verb or "descend"
        words += [v] + ([] if alt[0] == "flight" else ["to"]) + alt
    elif ctype is CommandType.SPEED:
        words += [verb or "reduce", "speed", "to"] + spell_digits(cmd.value)
    else:
        d = Direction(cmd.direction)
        lead = ["turn", d.value] if d is not Direction.NONE else [verb or "fly"]
        words += lead + ["heading"] + spell_digits(cmd.value if cmd.value else 360, 3)
    return " ".join(words)


# ----------------------------------------------------------------------------
# file formats

TRANSCRIPT_HEADER = ["start_t", "duration_s", "speaker", "text"]


def read_transcript_tsv(path) -> list[TranscriptUtterance]:
    out = []
    with open(path, newline="") as fh:
        rows = csv.reader(fh, delimiter="\t")
        header = next(rows, None)
        if header != TRANSCRIPT_HEADER:
            raise ValidationError(f"{path}: expected header {'<TAB>'.join(TRANSCRIPT_HEADER)}")
        for r in rows:
            if not r:
                continue
            out.append(TranscriptUtterance(float(r[0]), float(r[1]), r[2], r[3]))
    return out


def write_transcript_tsv(path, utterances: Iterable[TranscriptUtterance]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(TRANSCRIPT_HEADER)
        for u in utterances:
            w.writerow([f"{u.start_t:.2f}", f"{u.duration_s:.2f}", u.speaker, u.text])


def write_commands_jsonl(path, cmds: Iterable[ParsedCommand]) -> None:
    with open(path, "w") as fh:
        for c in cmds:
            fh.write(json.dumps(c.to_dict()) + "\n")


def read_commands_jsonl(path) -> list[ParsedCommand]:
    with open(path) as fh:
        return [ParsedCommand.from_dict(json.loads(line)) for line in fh if line.strip()]
