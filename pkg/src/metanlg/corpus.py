"""Corpus handling: dialogue acts, delexicalization, splits and episodes.

The on-disk formats are versioned JSON ("meta-nlg-corpus-v1"). A corpus file
holds DA-utterance records; a schema file declares the domains, act types
and per-domain slot lists that records are validated against.
"""

from __future__ import annotations

import json
import logging
import re
import string
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

FORMAT_TAG = "meta-nlg-corpus-v1"

_LABEL_RE = re.compile(r"^[a-z0-9_]+$")
_PLACEHOLDER_RE = re.compile(r"^\[slot-([a-z0-9_]+)-([a-z0-9_]+)\]$")
_PUNCT = set(string.punctuation) - {"[", "]"}


class CorpusFormatError(ValueError):
    """A corpus or schema file violates the declared format."""


def placeholder(domain, slot):
    return f"[slot-{domain}-{slot}]"


def parse_placeholder(token):
    """(domain, slot) if the token is a placeholder, else None."""
    m = _PLACEHOLDER_RE.match(token)
    if m is None:
        return None
    return m.group(1), m.group(2)


# ---------------------------------------------------------------------------
# schema


@dataclass(frozen=True)
class Schema:
    """Declared domains, act types and per-domain slots (Table-1 style)."""

    domains: tuple
    acts: tuple
    slots: dict  # domain -> tuple of slot names

    def __post_init__(self):
        for label in list(self.domains) + list(self.acts):
            _check_label(label)
        for domain, names in self.slots.items():
            if domain not in self.domains:
                raise CorpusFormatError(f"slots listed for unknown domain "
                                        f"{domain!r}")
            for s in names:
                _check_label(s)

    @property
    def slot_pairs(self):
        """All (domain, slot) pairs in a fixed, sorted order."""
        return tuple(sorted((d, s) for d in self.domains
                            for s in self.slots.get(d, ())))

    def da_dim(self):
        return len(self.acts) + len(self.slot_pairs)

    def to_dict(self):
        return {
            "format": FORMAT_TAG,
            "domains": list(self.domains),
            "acts": list(self.acts),
            "slots": {d: list(self.slots.get(d, ())) for d in self.domains},
        }

    @classmethod
    def from_dict(cls, obj):
        if obj.get("format") != FORMAT_TAG:
            raise CorpusFormatError("schema file missing format header "
                                    f"{FORMAT_TAG!r}")
        return cls(domains=tuple(obj["domains"]), acts=tuple(obj["acts"]),
                   slots={d: tuple(v) for d, v in obj["slots"].items()})

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            try:
                obj = json.load(fh)
            except json.JSONDecodeError as e:
                raise CorpusFormatError(f"cannot parse schema file: {e}") from e
        return cls.from_dict(obj)


def _check_label(label):
    if not _LABEL_RE.match(label):
        raise CorpusFormatError(
            f"label {label!r} must be lowercase [a-z0-9_]+ (placeholder "
            "tokens embed labels with '-' separators)")


# ---------------------------------------------------------------------------
# dialogue acts and examples


@dataclass(frozen=True)
class ActItem:
    """One act entry: (domain, act type, slot-value pairs)."""

    domain: str
    act: str
    slots: tuple  # of (name, value-or-None)


@dataclass(frozen=True)
class DialogueAct:
    acts: tuple  # of ActItem, at least one

    def __post_init__(self):
        if not self.acts:
            raise CorpusFormatError("dialogue act needs at least one entry")

    @property
    def domains(self):
        return frozenset(a.domain for a in self.acts)

    @property
    def act_types(self):
        return frozenset(a.act for a in self.acts)

    def valued_slots(self):
        """Counter of (domain, slot) over entries that carry a value."""
        c = Counter()
        for item in self.acts:
            for name, value in item.slots:
                if value:
                    c[(item.domain, name)] += 1
        return c

    def mentioned_slots(self):
        """All (domain, slot) mentioned, valued or not."""
        return frozenset((item.domain, name)
                         for item in self.acts for name, _ in item.slots)


@dataclass(frozen=True)
class CorpusExample:
    """One DA-utterance pair, stored delexicalized."""

    da: DialogueAct
    delex_tokens: tuple
    raw: str
    aligned: bool

    @property
    def domains(self):
        return self.da.domains

    @property
    def act_types(self):
        return self.da.act_types


# ---------------------------------------------------------------------------
# delexicalization


def tokenize(text):
    """Lowercase, split on whitespace, split punctuation off ordinary tokens.

    Placeholder tokens ([slot-...-...]) stay atomic.
    """
    out = []
    for tok in text.lower().split():
        if parse_placeholder(tok):
            out.append(tok)
            continue
        run = ""
        for ch in tok:
            if ch in _PUNCT:
                if run:
                    out.append(run)
                    run = ""
                out.append(ch)
            else:
                run += ch
        if run:
            out.append(run)
    return tuple(out)


def delexicalize(utterance, da):
    """Replace slot values with placeholder tokens, then tokenize.

    Longest values are substituted first; matching is case-insensitive and
    word-bounded, and every occurrence of a value is replaced. Returns
    (tokens, aligned): aligned is False when placeholder counts do not match
    the multiplicity of valued slots in the DA.
    """
    valued = []
    for item in da.acts:
        for name, value in item.slots:
            if value:
                valued.append((item.domain, name, value))
    text = utterance
    for domain, name, value in sorted(valued, key=lambda v: -len(v[2])):
        pattern = re.compile(r"(?<!\w)" + re.escape(value) + r"(?!\w)",
                             re.IGNORECASE)
        text = pattern.sub(" " + placeholder(domain, name) + " ", text)
    tokens = tokenize(text)
    counts = Counter(p for p in map(parse_placeholder, tokens) if p)
    aligned = counts == da.valued_slots()
    return tokens, aligned


def relexicalize(tokens, da):
    """Substitute DA slot values back into placeholder tokens.

    Values are consumed in DA order per (domain, slot); placeholders without
    a matching valued slot are kept verbatim. On aligned examples this
    inverts ``delexicalize`` up to case normalization.
    """
    queues = {}
    for item in da.acts:
        for name, value in item.slots:
            if value:
                queues.setdefault((item.domain, name), []).append(value)
    out = []
    for tok in tokens:
        pair = parse_placeholder(tok)
        if pair and queues.get(pair):
            out.extend(tokenize(queues[pair].pop(0)))
        else:
            out.append(tok)
    return tuple(out)


# ---------------------------------------------------------------------------
# corpus I/O


def _build_example(record, schema):
    acts = []
    for entry in record["da"]:
        domain, act = entry["domain"], entry["act"]
        if domain not in schema.domains:
            raise CorpusFormatError(f"unknown domain {domain!r}")
        if act not in schema.acts:
            raise CorpusFormatError(f"unknown act type {act!r}")
        slots = []
        for pair in entry["slots"]:
            name, value = pair[0], pair[1]
            if name not in schema.slots.get(domain, ()):
                raise CorpusFormatError(f"unknown slot {name!r} for domain "
                                        f"{domain!r}")
            slots.append((name, value))
        acts.append(ActItem(domain, act, tuple(slots)))
    da = DialogueAct(tuple(acts))
    text = record["text"]
    tokens, aligned = delexicalize(text, da)
    return CorpusExample(da=da, delex_tokens=tokens, raw=text, aligned=aligned)


def load_corpus(path, schema):
    """Read a corpus file; returns all examples, non-aligned ones flagged."""
    with open(path, encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as e:
            raise CorpusFormatError(f"cannot parse corpus file: {e}") from e
    if not isinstance(obj, dict) or obj.get("format") != FORMAT_TAG:
        raise CorpusFormatError(f"corpus file missing format header "
                                f"{FORMAT_TAG!r}")
    examples = [_build_example(rec, schema) for rec in obj["examples"]]
    bad = sum(1 for ex in examples if not ex.aligned)
    if bad:
        log.warning("%d of %d examples are not alignment-clean",
                    bad, len(examples))
    return examples


def save_corpus(examples, path):
    records = []
    for ex in examples:
        records.append({
            "da": [{"domain": a.domain, "act": a.act,
                    "slots": [[n, v] for n, v in a.slots]}
                   for a in ex.da.acts],
            "text": ex.raw,
        })
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"format": FORMAT_TAG, "examples": records}, fh,
                  ensure_ascii=False, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitSpec:
    mode: str  # "domain" or "act"
    target: str
    adaptation_size: int = 200
    validation_size: int = 200

    def __post_init__(self):
        if self.mode not in ("domain", "act"):
            raise ValueError(f"unknown split mode {self.mode!r}")


@dataclass(frozen=True)
class Split:
    spec: SplitSpec
    source: tuple       # high-resource pool, target label excluded
    adaptation: tuple   # low-resource fine-tuning set
    validation: tuple
    test: tuple


def _has_label(example, spec):
    labels = example.domains if spec.mode == "domain" else example.act_types
    return spec.target in labels


def make_split(examples, spec, seed):
    """Leave-one-out split: everything mentioning the target label goes to
    the target side, which a seeded shuffle partitions into
    adaptation/validation/test."""
    target = [ex for ex in examples if _has_label(ex, spec)]
    source = tuple(ex for ex in examples if not _has_label(ex, spec))
    needed = spec.adaptation_size + spec.validation_size + 1
    if len(target) < needed:
        raise ValueError(
            f"target {spec.target!r} has {len(target)} examples, need at "
            f"least {needed} for adaptation={spec.adaptation_size} + "
            f"validation={spec.validation_size} + test")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(target))
    target = [target[i] for i in order]
    a, v = spec.adaptation_size, spec.validation_size
    return Split(spec=spec,
                 source=source,
                 adaptation=tuple(target[:a]),
                 validation=tuple(target[a:a + v]),
                 test=tuple(target[a + v:]))


# ---------------------------------------------------------------------------
# meta tasks


@dataclass(frozen=True)
class MetaTask:
    """One episode: a support and a query set sharing a modality label."""

    support: tuple
    query: tuple
    modality: str

    def __post_init__(self):
        if len(self.support) != len(self.query):
            raise ValueError("support and query sizes differ")
        if {id(e) for e in self.support} & {id(e) for e in self.query}:
            raise ValueError("support and query overlap")


def sample_meta_task(pool_by_label, modality, half_size, rng):
    """Draw 2*half_size examples without replacement from one modality and
    split them evenly into support and query."""
    members = pool_by_label[modality]
    if len(members) < 2 * half_size:
        raise ValueError(
            f"modality {modality!r} has {len(members)} examples, "
            f"needs {2 * half_size}")
    picked = rng.choice(len(members), size=2 * half_size, replace=False)
    chosen = [members[i] for i in picked]
    return MetaTask(support=tuple(chosen[:half_size]),
                    query=tuple(chosen[half_size:]),
                    modality=modality)


class TaskSampler:
    """Episodic sampler over a source pool.

    Episodes are grouped by modality (domain label or act-type label);
    the modality per episode is chosen uniformly among eligible labels.
    A modality smaller than a full task shrinks its half-size to
    floor(count / 2) instead of being excluded, with one logged warning.
    """

    def __init__(self, pool, mode, half_size=200, seed=0, labels=None):
        if mode not in ("domain", "act"):
            raise ValueError(f"unknown task mode {mode!r}")
        self.mode = mode
        self.half_size = half_size
        self.rng = np.random.default_rng(seed)
        by_label = {}
        for ex in pool:
            found = ex.domains if mode == "domain" else ex.act_types
            for label in found:
                by_label.setdefault(label, []).append(ex)
        if labels is not None:
            by_label = {k: v for k, v in by_label.items() if k in labels}
        self.by_label = {k: tuple(v) for k, v in sorted(by_label.items())
                         if len(v) >= 2}
        if not self.by_label:
            raise ValueError("no modality in the pool has >= 2 examples")
        self.labels = tuple(self.by_label)
        self._warned = set()

    def effective_half(self, label):
        n = len(self.by_label[label])
        half = min(self.half_size, n // 2)
        if half < self.half_size and label not in self._warned:
            log.warning("modality %r has only %d examples; task half-size "
                        "shrunk to %d", label, n, half)
            self._warned.add(label)
        return half

    def sample(self):
        label = self.labels[int(self.rng.integers(len(self.labels)))]
        half = self.effective_half(label)
        return sample_meta_task(self.by_label, label, half, self.rng)


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SyntheticSpec:
    """Counts for the template-grammar corpus generator."""

    domains: int = 5
    acts: int = 8
    slots: int = 20
    templates: int = 3
    tails: int = 10
    examples: int = 2000
    multi_act_rate: float = 0.3
    values_per_slot: int = 8

    def __post_init__(self):
        for name in ("domains", "acts", "slots", "templates", "tails",
                     "examples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


_DOMAIN_NAMES = ["bistro", "lodge", "museum", "transit", "booking", "taxi",
                 "clinic", "cinema", "library", "market"]
_ACT_NAMES = ["inform", "request", "recommend", "book", "confirm", "select",
              "offer", "greet", "deny", "thank", "suggest", "welcome"]
_SLOT_NAMES = ["name", "area", "price", "phone", "addr", "post", "type",
               "food", "stars", "day", "time", "people", "dest", "depart",
               "leave", "arrive", "fee", "open", "ticket", "id", "ref",
               "car", "choice", "parking", "internet"]
_VALUE_WORDS = ["amber", "cedar", "velvet", "willow", "copper", "maple",
                "granite", "ivory", "cobalt", "saffron", "juniper", "quartz",
                "marble", "ginger", "indigo", "walnut", "coral", "sable",
                "linden", "topaz", "myrtle", "umber", "fennel", "larch",
                "onyx", "peony", "raffia", "sorrel", "tarragon", "verbena"]
# closing words are shared across domains; each domain only prefers one,
# so adapting to a new domain is a matter of reweighting, not new tokens
_TAILS = ["enjoy !", "cheers !", "noted .", "welcome .", "indeed .",
          "sure .", "okay .", "done .", "great .", "right ."]


def _names(base, count, prefix):
    out = list(base[:count])
    out += [f"{prefix}{i}" for i in range(len(out), count)]
    return out


def build_synthetic_schema(spec):
    """One specific slot per domain plus overlapping shared-slot subsets."""
    domains = _names(_DOMAIN_NAMES, spec.domains, "domain")
    acts = _names(_ACT_NAMES, spec.acts, "act")
    slot_names = _names(_SLOT_NAMES, spec.slots, "slot")
    n_specific = min(spec.domains, spec.slots)
    specific = slot_names[:n_specific]
    shared = slot_names[n_specific:]
    slots = {}
    for i, d in enumerate(domains):
        own = [specific[i]] if i < n_specific else []
        take = min(5, len(shared))
        picked = [shared[(2 * i + j) % len(shared)] for j in range(take)]
        slots[d] = tuple(own + sorted(set(picked)))
    return Schema(domains=tuple(domains), acts=tuple(acts), slots=slots)


def _value_pool(schema, spec, rng):
    """Globally unique two-word values per (domain, slot)."""
    pairs = [(a, b) for a in _VALUE_WORDS for b in _VALUE_WORDS if a != b]
    order = rng.permutation(len(pairs))
    pool = {}
    cursor = 0
    for key in schema.slot_pairs:
        values = []
        for _ in range(spec.values_per_slot):
            a, b = pairs[order[cursor % len(pairs)]]
            cursor += 1
            values.append(f"{a} {b}")
        pool[key] = values
    return pool


def _sentence(act, slot_values, domain_index, template_index, tail_index,
              request=False):
    """One clause built only from tokens shared across domains.

    Domain identity shows up in the mixture over templates and tails (and
    in which slots occur), never as a domain-specific word.
    """
    tail = " " + _TAILS[tail_index]
    if not slot_values:
        forms = ["hello , how can i help ?",
                 "thank you , goodbye .",
                 "you are welcome ."]
        return forms[template_index % len(forms)] + tail
    if request:
        parts = " and ".join(f"the {s}" for s, _ in slot_values)
        forms = [f"which of {parts} do you want ?",
                 f"please tell me {parts} .",
                 f"i still need {parts} ."]
        return forms[template_index % len(forms)] + tail
    body = " and ".join(f"the {s} is {v}" for s, v in slot_values)
    forms = [f"{body} .",
             f"i can {act} that {body} .",
             f"{body} , if that helps ."]
    return forms[template_index % len(forms)] + tail


def gen_synthetic(spec, seed):
    """Deterministic template-grammar corpus; returns (schema, examples)."""
    rng = np.random.default_rng(seed)
    schema = build_synthetic_schema(spec)
    values = _value_pool(schema, spec, rng)
    # act semantics by position: index 1 requests, index 7 has no slots
    request_acts = {schema.acts[1]} if spec.acts > 1 else set()
    bare_acts = {schema.acts[7]} if spec.acts > 7 else set()

    def pick_biased(count, pref):
        # each domain leans on one template and one tail; the rest are noise
        if rng.random() < 0.7:
            return pref % count
        return int(rng.integers(count))

    def one_act(domain_i):
        domain = schema.domains[domain_i]
        act = schema.acts[int(rng.integers(len(schema.acts)))]
        template_i = pick_biased(spec.templates, domain_i)
        tail_i = pick_biased(min(spec.tails, len(_TAILS)), domain_i)
        if act in bare_acts:
            return (ActItem(domain, act, ()),
                    _sentence(act, [], domain_i, template_i, tail_i))
        domain_slots = schema.slots[domain]
        k = int(rng.integers(1, min(2, len(domain_slots)) + 1))
        picked = rng.choice(len(domain_slots), size=k, replace=False)
        names = [domain_slots[i] for i in sorted(picked)]
        if act in request_acts:
            pairs = [(n, None) for n in names]
            text = _sentence(act, pairs, domain_i, template_i, tail_i,
                             request=True)
        else:
            pairs = []
            for n in names:
                pool = values[(domain, n)]
                pairs.append((n, pool[int(rng.integers(len(pool)))]))
            text = _sentence(act, pairs, domain_i, template_i, tail_i)
        return ActItem(domain, act, tuple(pairs)), text

    examples = []
    for _ in range(spec.examples):
        d0 = int(rng.integers(spec.domains))
        item, text = one_act(d0)
        acts = [item]
        if spec.domains > 1 and rng.random() < spec.multi_act_rate:
            d1 = int(rng.integers(spec.domains))
            item2, text2 = one_act(d1)
            acts.append(item2)
            text = text + " " + text2
        da = DialogueAct(tuple(acts))
        tokens, aligned = delexicalize(text, da)
        examples.append(CorpusExample(da=da, delex_tokens=tokens, raw=text,
                                      aligned=aligned))
    return schema, examples
