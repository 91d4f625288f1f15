"""Canary universes: template minting, authored codebooks, subset sampling.

A universe is an immutable, ordered list of canaries, either lexical (an
exact string value) or semantic (a reference to a detector rule). Lexical
values are minted from a closed template grammar rather than free regex so
that minting and recognition are trivially total:

    segments   literal text                e.g. ``BK-``
               ``ALPHA{j}`` / ``{ALPHAj}``  j uppercase letters
               ``alpha{j}`` / ``{alphaj}``  j lowercase letters
               ``DIGIT{j}`` / ``{DIGITj}``  j digits
               ``ALNUM{j}`` / ``{ALNUMj}``  j mixed-case alphanumerics
               ``UUID4`` / ``{UUID4}``      a version-4 UUID shape

Both spellings are accepted; braces are reserved for segments, so any other
braced text is a malformed pattern. The shortest mintable value must be at
least 8 characters, a floor that keeps accidental collisions with unrelated
log content negligible.

Everything here is a pure function of its inputs plus an explicit 64-bit
seed (generator: SplitMix64, see ``_rng``). Sampling a k-subset is a partial
Fisher-Yates over the universe indices, exactly uniform over all C(n, k)
subsets.
"""

from __future__ import annotations

import json
import re
import string
from dataclasses import dataclass
from pathlib import Path

from ._rng import SplitMix64, derive_seed
from .errors import FormatError, ParameterError, TemplateError

_ALPHABETS = {
    "ALPHA": string.ascii_uppercase,
    "alpha": string.ascii_lowercase,
    "DIGIT": string.digits,
    "ALNUM": string.ascii_uppercase + string.ascii_lowercase + string.digits,
}

_SEG_RE = re.compile(
    r"\{(ALPHA|alpha|DIGIT|ALNUM)(\d+)\}"
    r"|(ALPHA|alpha|DIGIT|ALNUM)\{(\d+)\}"
    r"|\{UUID4\}"
    r"|UUID4"
)

_UUID_LEN = 36
MIN_VALUE_LENGTH = 8


def compile_template(pattern: str) -> tuple[tuple[str, object], ...]:
    """Parse a pattern into segments, validating the whole grammar.

    Returns ``(kind, arg)`` pairs where kind is ``lit`` (arg: text), a class
    name (arg: count), or ``UUID4`` (arg: None). Raises TemplateError for
    stray braces, zero-width segments, or patterns below the length floor.
    """
    segments: list[tuple[str, object]] = []
    pos = 0
    for m in _SEG_RE.finditer(pattern):
        if m.start() > pos:
            segments.append(("lit", pattern[pos : m.start()]))
        if m.group(1) is not None:
            segments.append((m.group(1), int(m.group(2))))
        elif m.group(3) is not None:
            segments.append((m.group(3), int(m.group(4))))
        else:
            segments.append(("UUID4", None))
        pos = m.end()
    if pos < len(pattern):
        segments.append(("lit", pattern[pos:]))

    if not segments:
        raise TemplateError("empty pattern")
    min_len = 0
    for kind, arg in segments:
        if kind == "lit":
            text = str(arg)
            if "{" in text or "}" in text:
                raise TemplateError(
                    f"braces are reserved for segments; bad literal {text!r} "
                    f"in pattern {pattern!r}"
                )
            min_len += len(text)
        elif kind == "UUID4":
            min_len += _UUID_LEN
        else:
            count = int(arg)  # type: ignore[arg-type]
            if count < 1:
                raise TemplateError(f"zero-width segment in pattern {pattern!r}")
            min_len += count
    if min_len < MIN_VALUE_LENGTH:
        raise TemplateError(
            f"mintable values of pattern {pattern!r} have length {min_len}, "
            f"below the floor of {MIN_VALUE_LENGTH}"
        )
    return tuple(segments)


@dataclass(frozen=True)
class CanaryTemplate:
    template_id: str
    pattern: str
    description: str = ""

    def __post_init__(self) -> None:
        compile_template(self.pattern)

    def regex(self) -> re.Pattern[str]:
        """Recognizer accepting exactly the mintable values."""
        parts = []
        for kind, arg in compile_template(self.pattern):
            if kind == "lit":
                parts.append(re.escape(str(arg)))
            elif kind == "UUID4":
                parts.append(
                    r"[0-9a-f]{8}-[0-9a-f]{4}-4[0-9a-f]{3}-[89ab][0-9a-f]{3}-[0-9a-f]{12}"
                )
            else:
                parts.append(f"[{re.escape(_ALPHABETS[kind])}]{{{arg}}}")
        return re.compile("".join(parts))

    def matches(self, value: str) -> bool:
        return self.regex().fullmatch(value) is not None


def _mint_uuid4(rng: SplitMix64) -> str:
    raw = bytearray(16)
    for i in range(0, 16, 8):
        word = rng.next_u64()
        for j in range(8):
            raw[i + j] = (word >> (8 * j)) & 0xFF
    raw[6] = (raw[6] & 0x0F) | 0x40
    raw[8] = (raw[8] & 0x3F) | 0x80
    hx = raw.hex()
    return f"{hx[:8]}-{hx[8:12]}-{hx[12:16]}-{hx[16:20]}-{hx[20:]}"


def mint_lexical(template: CanaryTemplate, seed: int) -> str:
    """Mint one value; deterministic in (template pattern, seed)."""
    rng = SplitMix64(derive_seed(seed, "mint", template.pattern))
    out: list[str] = []
    for kind, arg in compile_template(template.pattern):
        if kind == "lit":
            out.append(str(arg))
        elif kind == "UUID4":
            out.append(_mint_uuid4(rng))
        else:
            alphabet = _ALPHABETS[kind]
            out.append(
                "".join(alphabet[rng.randrange(len(alphabet))] for _ in range(int(arg)))  # type: ignore[arg-type]
            )
    return "".join(out)


# ---------------------------------------------------------------------------
# Universes
# ---------------------------------------------------------------------------

LEXICAL = "lexical"
SEMANTIC = "semantic"


@dataclass(frozen=True)
class Canary:
    """One universe item: exactly one of value / rule_id, matching the class."""

    canary_id: str
    klass: str
    value: str | None = None
    rule_id: str | None = None
    utility_bearing: bool = False

    def __post_init__(self) -> None:
        if not self.canary_id:
            raise FormatError("canary_id must be non-empty")
        if self.klass == LEXICAL:
            if not self.value or self.rule_id is not None:
                raise FormatError(
                    f"lexical canary {self.canary_id!r} must carry a value and no rule_id"
                )
        elif self.klass == SEMANTIC:
            if not self.rule_id or self.value is not None:
                raise FormatError(
                    f"semantic canary {self.canary_id!r} must carry a rule_id and no value"
                )
        else:
            raise FormatError(
                f"unknown canary class {self.klass!r} on {self.canary_id!r}"
            )


@dataclass(frozen=True)
class CanaryUniverse:
    """Immutable once constructed; edits belong in a new universe_id."""

    universe_id: str
    domain_tag: str
    items: tuple[Canary, ...]

    def __post_init__(self) -> None:
        if not self.items:
            raise FormatError(f"universe {self.universe_id!r} is empty")
        ids = [c.canary_id for c in self.items]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise FormatError(f"duplicate canary ids in universe: {dupes}")
        values = [c.value for c in self.items if c.klass == LEXICAL]
        if len(set(values)) != len(values):
            raise FormatError("duplicate lexical values in universe")

    @property
    def n(self) -> int:
        return len(self.items)

    def item(self, canary_id: str) -> Canary:
        for c in self.items:
            if c.canary_id == canary_id:
                return c
        raise KeyError(canary_id)

    def lexical_values(self) -> dict[str, str]:
        return {c.canary_id: c.value for c in self.items if c.klass == LEXICAL}

    def semantic_rules(self) -> dict[str, str]:
        return {c.canary_id: c.rule_id for c in self.items if c.klass == SEMANTIC}


@dataclass(frozen=True)
class SampledSet:
    """The secretly sampled k-subset K, with the seed that reproduces it."""

    universe_id: str
    k: int
    members: tuple[str, ...]
    rng_seed: int

    def __post_init__(self) -> None:
        if self.k != len(self.members):
            raise FormatError("k does not match the member count")
        if len(set(self.members)) != len(self.members):
            raise FormatError("sampled members are not distinct")


def sample_subset(universe: CanaryUniverse, k: int, seed: int) -> SampledSet:
    """Uniform k-subset of the universe, deterministic per seed.

    Members are listed in universe order, so equal subsets serialize
    identically regardless of draw order.
    """
    if not 0 <= k <= universe.n:
        raise ParameterError(f"need 0 <= k <= n={universe.n}, got k={k}")
    rng = SplitMix64(derive_seed(seed, "sample", universe.universe_id))
    picked = sorted(rng.sample_indices(universe.n, k))
    members = tuple(universe.items[i].canary_id for i in picked)
    return SampledSet(universe.universe_id, k, members, seed)


def resolve_sample(
    sample: SampledSet, universe: CanaryUniverse
) -> tuple[dict[str, str], dict[str, str]]:
    """Split a sample into (lexical values, semantic rule ids) by canary id."""
    if sample.universe_id != universe.universe_id:
        raise FormatError(
            f"sample is from universe {sample.universe_id!r}, "
            f"not {universe.universe_id!r}"
        )
    values: dict[str, str] = {}
    rules: dict[str, str] = {}
    for cid in sample.members:
        c = universe.item(cid)
        if c.klass == LEXICAL:
            values[cid] = c.value  # type: ignore[assignment]
        else:
            rules[cid] = c.rule_id  # type: ignore[assignment]
    return values, rules


# ---------------------------------------------------------------------------
# Codebook files
# ---------------------------------------------------------------------------


def _canary_to_dict(c: Canary) -> dict:
    d: dict = {"canary_id": c.canary_id, "class": c.klass}
    if c.value is not None:
        d["value"] = c.value
    if c.rule_id is not None:
        d["rule_id"] = c.rule_id
    d["utility_bearing"] = c.utility_bearing
    return d


def save_universe(universe: CanaryUniverse, path: str | Path) -> None:
    payload = {
        "universe_id": universe.universe_id,
        "domain_tag": universe.domain_tag,
        "items": [_canary_to_dict(c) for c in universe.items],
    }
    Path(path).write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")


def universe_from_dict(payload: dict) -> CanaryUniverse:
    try:
        universe_id = payload["universe_id"]
        domain_tag = payload["domain_tag"]
        raw_items = payload["items"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"codebook file missing field: {exc}") from exc
    items = []
    for raw in raw_items:
        try:
            items.append(
                Canary(
                    canary_id=raw["canary_id"],
                    klass=raw["class"],
                    value=raw.get("value"),
                    rule_id=raw.get("rule_id"),
                    utility_bearing=bool(raw.get("utility_bearing", False)),
                )
            )
        except KeyError as exc:
            raise FormatError(f"codebook item missing field: {exc}") from exc
    return CanaryUniverse(universe_id, domain_tag, tuple(items))


def load_universe(path: str | Path) -> CanaryUniverse:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"codebook file is not valid JSON: {exc}") from exc
    return universe_from_dict(payload)


def make_lexical_universe(
    universe_id: str,
    n: int,
    template: CanaryTemplate,
    seed: int,
    domain_tag: str = "synthetic",
    utility_bearing: bool = True,
) -> CanaryUniverse:
    """Mint an n-item lexical universe with distinct values (for simulations)."""
    values: list[str] = []
    seen: set[str] = set()
    stream = 0
    while len(values) < n:
        v = mint_lexical(template, derive_seed(seed, "universe", universe_id, stream))
        stream += 1
        if v not in seen:
            seen.add(v)
            values.append(v)
    items = tuple(
        Canary(
            canary_id=f"{universe_id}-{i:04d}",
            klass=LEXICAL,
            value=v,
            utility_bearing=utility_bearing,
        )
        for i, v in enumerate(values)
    )
    return CanaryUniverse(universe_id, domain_tag, items)
