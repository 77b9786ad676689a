"""Shared fixtures and independent oracles for the test suite.

The oracles here deliberately re-derive results through a different code
path than the library (unbatched loops, closed-form arithmetic) so that
agreement between the two is meaningful.
"""

from __future__ import annotations

import numpy as np

from desklm import model as mdl
from desklm.corpus import Document
from desklm.subwords import SubwordModel, MASK_ID

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
           "bl", "br", "dr", "fl", "gr", "kr", "pl", "pr", "sk", "sl", "sm",
           "sn", "sp", "st", "tr", "zw"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ea", "io", "ou"]
_CODAS = ["", "n", "s", "t", "r", "l", "m", "k", "nd", "st", "rn"]


def pseudo_lexicon(n_words: int, seed: int) -> list[str]:
    """Deterministic list of distinct pronounceable pseudo-words."""
    rng = np.random.default_rng(seed)
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < n_words:
        syllables = rng.integers(2, 4)
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))]
                    + _VOWELS[rng.integers(len(_VOWELS))]
                    + _CODAS[rng.integers(len(_CODAS))]
                    for _ in range(syllables))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def make_pseudo_corpus(n_sentences: int, seed: int, lexicon_size: int = 800,
                       min_len: int = 6, max_len: int = 12) -> list[Document]:
    """Sentences of pseudo-words: lexically rich enough to train large
    subword vocabularies, with enough repetition to be learnable."""
    words = pseudo_lexicon(lexicon_size, seed)
    rng = np.random.default_rng([seed, 77])
    # zipf-ish reuse so frequent words dominate and MLM has signal
    ranks = np.arange(1, lexicon_size + 1, dtype=np.float64)
    probs = (1.0 / ranks) / (1.0 / ranks).sum()
    docs = []
    for i in range(n_sentences):
        length = int(rng.integers(min_len, max_len + 1))
        picks = rng.choice(lexicon_size, size=length, p=probs)
        docs.append(Document(id=f"pseudo-{i:05d}", source="unconstrained",
                             text=" ".join(words[j] for j in picks)))
    return docs


def brute_force_pll(params: mdl.ParameterSet, subwords: SubwordModel,
                    sentence: str) -> float:
    """Reference PLL: one unbatched forward pass per masked position."""
    ids = subwords.encode(sentence)
    total = 0.0
    for i in range(len(ids)):
        corrupted = list(ids)
        corrupted[i] = MASK_ID
        row = np.asarray([corrupted], dtype=np.int64)
        out = mdl.encoder_forward(params, row, np.ones_like(row, dtype=bool))
        logits = mdl.mlm_logits(params, out).data[0, i]
        # independent log-softmax via logaddexp reduction
        lse = np.logaddexp.reduce(logits)
        total += float(logits[ids[i]] - lse)
    return total


def zero_params(config: mdl.ModelConfig) -> mdl.ParameterSet:
    """A model whose every weight is zero: exactly uniform MLM logits."""
    params = mdl.init_params(config)
    for t in params.tensors.values():
        t.data[...] = 0.0
    return params


def fd_check_params(params: mdl.ParameterSet, loss_fn, grads: dict,
                    coords_per_tensor: int, seed: int, eps: float = 1e-6,
                    rel_tol: float = 1e-4, abs_floor: float = 1e-7) -> list[str]:
    """Central finite differences on sampled coordinates of every tensor.

    Returns a list of human-readable mismatch descriptions (empty = pass).
    """
    rng = np.random.default_rng(seed)
    failures = []
    for name, t in params.items():
        flat = t.data.reshape(-1)
        gflat = grads[name].reshape(-1)
        k = min(coords_per_tensor, flat.size)
        for i in rng.choice(flat.size, size=k, replace=False):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(loss_fn().data)
            flat[i] = orig - eps
            down = float(loss_fn().data)
            flat[i] = orig
            fd = (up - down) / (2.0 * eps)
            analytic = gflat[i]
            err = abs(analytic - fd)
            if err > rel_tol * max(abs(analytic), abs(fd)) and err > abs_floor:
                failures.append(f"{name}[{i}]: analytic {analytic:.3e} fd {fd:.3e}")
    return failures
