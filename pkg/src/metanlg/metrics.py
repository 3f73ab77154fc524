"""Evaluation: corpus BLEU-4, slot error rate, and run reporting.

BLEU is corpus-level with single references and no smoothing: a zero
modified precision at any order makes the score exactly 0, which keeps
results bit-reproducible against a counting oracle. The slot error rate
counts placeholder tokens in the delexicalized output against the valued
slots of the dialogue act; redundant placeholders are unbounded, so the
rate can exceed 1.
"""

from __future__ import annotations

import csv
import math
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import NamedTuple

from .corpus import parse_placeholder
from .model import decode


def _ngrams(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def bleu4(candidates, references):
    """Corpus-level BLEU-4 over parallel token-sequence lists."""
    if len(candidates) != len(references):
        raise ValueError("candidate and reference counts differ")
    if not candidates:
        raise ValueError("empty corpus")
    clipped = [0, 0, 0, 0]
    total = [0, 0, 0, 0]
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(candidates, references):
        cand = tuple(cand)
        ref = tuple(ref)
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, 5):
            counts = Counter(_ngrams(cand, n))
            ref_counts = Counter(_ngrams(ref, n))
            total[n - 1] += sum(counts.values())
            clipped[n - 1] += sum(min(c, ref_counts[g])
                                  for g, c in counts.items())
    if any(c == 0 for c in clipped) or any(t == 0 for t in total):
        return 0.0
    log_prec = sum(0.25 * math.log(c / t) for c, t in zip(clipped, total))
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_prec)


class SlotErrors(NamedTuple):
    err: float
    missing: int
    redundant: int
    total: int


def slot_error_rate(generated_tokens, da):
    """(err, missing, redundant, total) for one generated utterance.

    Expected placeholder occurrences equal each valued slot's multiplicity
    in the DA; placeholders outside the DA are redundant. With no valued
    slots the rate is 0 when nothing was generated, else the redundant
    count (kept finite without a denominator).
    """
    expected = da.valued_slots()
    produced = Counter(p for p in map(parse_placeholder, generated_tokens)
                       if p)
    missing = sum(max(0, n - produced.get(k, 0)) for k, n in expected.items())
    redundant = sum(max(0, n - expected.get(k, 0))
                    for k, n in produced.items())
    total = sum(expected.values())
    if total > 0:
        err = (missing + redundant) / total
    else:
        err = float(redundant)
    return SlotErrors(err=err, missing=missing, redundant=redundant,
                      total=total)


@dataclass
class EvalResult:
    bleu4: float
    err: float
    missing: int
    redundant: int
    total_slots: int
    n_examples: int

    def to_dict(self):
        return {"bleu4": self.bleu4, "err": self.err,
                "missing": self.missing, "redundant": self.redundant,
                "total_slots": self.total_slots,
                "n_examples": self.n_examples}


def evaluate(params, examples, vocab, schema, cfg, beam_width=5, max_len=40):
    """Decode every DA (top-1) and aggregate corpus BLEU-4 and micro ERR."""
    from .model import da_vector

    if not examples:
        raise ValueError("no examples to evaluate")
    candidates = []
    references = []
    missing = redundant = total = 0
    for ex in examples:
        beams = decode(params, da_vector(ex.da, schema), cfg,
                       beam_width=beam_width, max_len=max_len)
        tokens = vocab.decode(beams[0][0]) if beams else ()
        candidates.append(tokens)
        references.append(ex.delex_tokens)
        errs = slot_error_rate(tokens, ex.da)
        missing += errs.missing
        redundant += errs.redundant
        total += errs.total
    err = (missing + redundant) / total if total > 0 else float(redundant)
    return EvalResult(bleu4=bleu4(candidates, references), err=err,
                      missing=missing, redundant=redundant,
                      total_slots=total, n_examples=len(examples))


# ---------------------------------------------------------------------------
# run reports


@dataclass(frozen=True)
class ReportRow:
    phase: str
    step: int
    split: str
    nll: float
    bleu4: float = None
    err: float = None
    seconds: float = None


CSV_HEADER = ("phase", "step", "split", "nll", "bleu4", "err", "seconds")


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".6f")
    return str(value)


@dataclass
class TrainRunReport:
    """Ordered per-step/per-epoch metric rows for one training run."""

    rows: list = field(default_factory=list)

    def add(self, phase, step, split, nll, bleu4=None, err=None,
            seconds=None):
        if self.rows:
            last = self.rows[-1]
            if last.phase == phase and step <= last.step:
                raise ValueError(
                    f"rows must be strictly ordered: step {step} after "
                    f"{last.step} in phase {phase!r}")
        self.rows.append(ReportRow(phase, step, split, nll, bleu4, err,
                                   seconds))

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_HEADER)
            for row in self.rows:
                writer.writerow([row.phase, str(row.step), row.split,
                                 _fmt(row.nll), _fmt(row.bleu4),
                                 _fmt(row.err), _fmt(row.seconds)])

    @classmethod
    def from_csv(cls, path):
        report = cls()
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            if header != CSV_HEADER:
                raise ValueError(f"unexpected report header {header}")
            for rec in reader:
                phase, step, split, nll, b4, err, secs = rec
                report.rows.append(ReportRow(
                    phase, int(step), split, float(nll),
                    float(b4) if b4 else None,
                    float(err) if err else None,
                    float(secs) if secs else None))
        return report


class Stopwatch:
    """Wall-clock timing that reports are free to ignore (timing values are
    left out of reports by default so seeded runs stay byte-identical)."""

    def __init__(self, enabled):
        self.enabled = enabled
        self.t0 = time.monotonic()

    def elapsed(self):
        return time.monotonic() - self.t0 if self.enabled else None
