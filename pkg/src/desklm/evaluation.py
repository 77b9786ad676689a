"""Minimal-pair preference evaluation via pseudo-log-likelihood.

A sentence's score is the sum over positions of the log-probability of
the original token when that position alone is masked (no length
normalization, so under a uniform model longer sentences score strictly
lower, a known artifact; minimal pairs are near-equal length). A pair is
correct when the grammatical sentence scores strictly higher; ties count
as incorrect.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autograd as ag
from . import model as mdl
from .model import ParameterSet
from .subwords import SubwordModel, MASK_ID

SUBJECT_VERB = "subject-verb agreement"
DETERMINER_NOUN = "determiner-noun agreement"


@dataclass(frozen=True)
class MinimalPair:
    good: str
    bad: str
    phenomenon: str

    def __post_init__(self):
        if not self.good or not self.bad:
            raise ValueError("both sentences must be non-empty")
        if self.good == self.bad:
            raise ValueError("good and bad sentences must differ")
        if not self.phenomenon:
            raise ValueError("phenomenon must be non-empty")


class EvalReport:
    """Per-phenomenon correct/total counts plus identifying strings."""

    def __init__(self, model_id: str, pairs_id: str,
                 counts: dict[str, tuple[int, int]]):
        for name, (correct, total) in counts.items():
            if not 0 <= correct <= total:
                raise ValueError(f"bad counts for {name!r}: {correct}/{total}")
        self.model_id = model_id
        self.pairs_id = pairs_id
        self.counts = {k: (int(c), int(t)) for k, (c, t) in counts.items()}

    def accuracy(self, phenomenon: str) -> float:
        c, t = self.counts[phenomenon]
        return c / t

    @property
    def pair_count(self) -> int:
        return sum(t for _, t in self.counts.values())

    @property
    def macro_average(self) -> float:
        accs = [c / t for c, t in self.counts.values()]
        return sum(accs) / len(accs)

    def to_json(self) -> str:
        obj = {
            "model": self.model_id,
            "pairs": self.pairs_id,
            "phenomena": {
                name: {"correct": c, "total": t, "accuracy": c / t}
                for name, (c, t) in sorted(self.counts.items())
            },
            "macro_average": self.macro_average,
            "pair_count": self.pair_count,
        }
        return json.dumps(obj, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        obj = json.loads(text)
        counts = {name: (rec["correct"], rec["total"])
                  for name, rec in obj["phenomena"].items()}
        report = cls(obj["model"], obj["pairs"], counts)
        if report.pair_count != obj["pair_count"]:
            raise ValueError("pair_count does not match per-phenomenon totals")
        return report

    def to_text(self) -> str:
        width = max([len(n) for n in self.counts] + [len("phenomenon")])
        lines = [f"{'phenomenon':<{width}}  correct  total  accuracy"]
        for name, (c, t) in sorted(self.counts.items()):
            lines.append(f"{name:<{width}}  {c:>7d}  {t:>5d}  {c / t:8.4f}")
        lines.append(f"{'macro average':<{width}}  {'':>7}  {self.pair_count:>5d}  "
                     f"{self.macro_average:8.4f}")
        return "\n".join(lines) + "\n"


def pseudo_log_likelihood(params: ParameterSet, subwords: SubwordModel,
                          sentence: str) -> float:
    """Sum of masked-position log-probabilities of the original tokens."""
    ids = subwords.encode(sentence)
    n = len(ids)
    if n == 0:
        raise ValueError(f"sentence tokenizes to zero tokens: {sentence!r}")
    if n > params.config.max_positions:
        raise ValueError(
            f"sentence is {n} tokens, model accepts {params.config.max_positions}"
        )
    arr = np.asarray(ids, dtype=np.int64)
    batch = np.tile(arr, (n, 1))
    np.fill_diagonal(batch, MASK_ID)
    with ag.no_grad():
        out = mdl.encoder_forward(params, batch, np.ones_like(batch, dtype=bool))
        logits = mdl.mlm_logits(params, out)
    diag = logits.data[np.arange(n), np.arange(n)]          # (n, V)
    logp = diag - diag.max(axis=-1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=-1, keepdims=True))
    return float(logp[np.arange(n), arr].sum())


def score_pair(params: ParameterSet, subwords: SubwordModel,
               pair: MinimalPair) -> bool:
    """True when the grammatical sentence is strictly preferred."""
    return (pseudo_log_likelihood(params, subwords, pair.good)
            > pseudo_log_likelihood(params, subwords, pair.bad))


def evaluate_suite(params: ParameterSet, subwords: SubwordModel,
                   pairs: Sequence[MinimalPair], model_id: str = "",
                   pairs_id: str = "") -> EvalReport:
    if not pairs:
        raise ValueError("no pairs to evaluate")
    counts: dict[str, list[int]] = {}
    for pair in pairs:
        c = counts.setdefault(pair.phenomenon, [0, 0])
        c[0] += int(score_pair(params, subwords, pair))
        c[1] += 1
    return EvalReport(model_id, pairs_id, {k: (c, t) for k, (c, t) in counts.items()})


# -- synthetic minimal pairs --------------------------------------------------

# closed vocabulary: (singular, plural) noun and verb forms, modifiers,
# and sentence tails; every template slot differs in exactly one token
_NOUNS = [
    ("cat", "cats"), ("dog", "dogs"), ("bird", "birds"), ("horse", "horses"),
    ("teacher", "teachers"), ("farmer", "farmers"), ("student", "students"),
    ("doctor", "doctors"), ("child", "children"), ("woman", "women"),
    ("man", "men"), ("friend", "friends"), ("sister", "sisters"),
    ("brother", "brothers"), ("neighbor", "neighbors"), ("artist", "artists"),
]
_VERBS = [
    ("sleeps", "sleep"), ("runs", "run"), ("sings", "sing"), ("jumps", "jump"),
    ("smiles", "smile"), ("waits", "wait"), ("works", "work"), ("plays", "play"),
    ("reads", "read"), ("writes", "write"), ("listens", "listen"),
    ("dances", "dance"),
]
_ADJECTIVES = ["old", "young", "tall", "small", "happy", "quiet", "clever", "kind"]
_TAILS = [
    "near the river", "in the garden", "at the market", "after lunch",
    "every morning", "on the hill", "by the door", "before dawn",
    "at night", "in the town",
]
_DETERMINERS = [("this", "these"), ("that", "those")]

_KIND_ALIASES = {
    "subject-verb": SUBJECT_VERB,
    SUBJECT_VERB: SUBJECT_VERB,
    "determiner-noun": DETERMINER_NOUN,
    DETERMINER_NOUN: DETERMINER_NOUN,
}


def toy_vocabulary_sentences() -> list[str]:
    """Every word of the toy grammar in sentence form, for tokenizer
    training fixtures (covers nouns, verbs, adjectives, tails, determiners)."""
    words: list[str] = ["the"]
    for s, p in _NOUNS + _VERBS + _DETERMINERS:
        words += [s, p]
    words += _ADJECTIVES
    for t in _TAILS:
        words += t.split()
    return [" ".join(words[i: i + 8]) for i in range(0, len(words), 8)]


def generate_toy_minimal_pairs(kind: str, n: int, seed: int) -> list[MinimalPair]:
    """Template-generated agreement pairs over a closed vocabulary.

    The grammatical sentence follows the template grammar; the
    ungrammatical twin flips exactly one token (verb inflection for
    subject-verb, the determiner for determiner-noun). Singular and
    plural subjects are drawn in equal proportion. Pairs are unique by
    rejection; deterministic for a given seed.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    phenomenon = _KIND_ALIASES.get(kind)
    if phenomenon is None:
        raise ValueError(f"unknown pair kind {kind!r}; "
                         f"expected 'subject-verb' or 'determiner-noun'")
    rng = np.random.default_rng(seed)
    pairs: list[MinimalPair] = []
    seen: set[str] = set()
    attempts = 0
    max_attempts = 200 * n + 10000
    while len(pairs) < n:
        attempts += 1
        if attempts > max_attempts:
            raise ValueError(f"could not generate {n} unique pairs "
                             f"(vocabulary too small); got {len(pairs)}")
        plural = bool(rng.integers(2))
        noun = _NOUNS[rng.integers(len(_NOUNS))][plural]
        verb_sg, verb_pl = _VERBS[rng.integers(len(_VERBS))]
        good_verb, bad_verb = (verb_pl, verb_sg) if plural else (verb_sg, verb_pl)
        adj = _ADJECTIVES[rng.integers(len(_ADJECTIVES))] if rng.integers(2) else None
        tail = _TAILS[rng.integers(len(_TAILS))]
        np_words = ([adj, noun] if adj else [noun])
        if phenomenon == SUBJECT_VERB:
            subject = ["the"] + np_words
            good = " ".join(subject + [good_verb, tail])
            bad = " ".join(subject + [bad_verb, tail])
        else:
            det_sg, det_pl = _DETERMINERS[rng.integers(len(_DETERMINERS))]
            good_det, bad_det = (det_pl, det_sg) if plural else (det_sg, det_pl)
            good = " ".join([good_det] + np_words + [good_verb, tail])
            bad = " ".join([bad_det] + np_words + [good_verb, tail])
        if good in seen:
            continue
        seen.add(good)
        pairs.append(MinimalPair(good, bad, phenomenon))
    return pairs


# -- pair file io -------------------------------------------------------------

def save_minimal_pairs(pairs: Iterable[MinimalPair], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in pairs:
            f.write(json.dumps({"good": p.good, "bad": p.bad,
                                "phenomenon": p.phenomenon}, sort_keys=True) + "\n")


def load_minimal_pairs(path: str | Path) -> list[MinimalPair]:
    """Native format: one JSON record per line, fields good/bad/phenomenon."""
    pairs = []
    with open(path, encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                pairs.append(MinimalPair(rec["good"], rec["bad"], rec["phenomenon"]))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ValueError(f"{path}: line {ln}: bad pair record ({e})") from e
    return pairs


def load_blimp_pairs(path: str | Path) -> list[MinimalPair]:
    """BLiMP-format loader: fields sentence_good / sentence_bad / UID."""
    pairs = []
    with open(path, encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                pairs.append(MinimalPair(rec["sentence_good"], rec["sentence_bad"],
                                         rec["UID"]))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ValueError(f"{path}: line {ln}: bad BLiMP record ({e})") from e
    return pairs
