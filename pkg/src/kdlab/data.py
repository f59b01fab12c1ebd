"""Synthetic instruction corpora, a fixed character tokenizer, noise
injection, and packing of samples into fixed-length training rows.

General task families stand in for broad instruction data; the "catalog"
families are the held-out domain. Every family has a deterministic oracle
solver so generated data can be verified and scored exactly.
"""

from __future__ import annotations

import json
import string
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, CorpusParseError, EncodingError, PackingError, VocabularyError

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
SEP_ID = 3

ALPHABET = " " + string.ascii_lowercase + string.ascii_uppercase + string.digits + string.punctuation
_CHAR_TO_ID = {ch: i + 4 for i, ch in enumerate(ALPHABET)}
_ID_TO_CHAR = {i: ch for ch, i in _CHAR_TO_ID.items()}

VOCAB_SIZE = 4 + len(ALPHABET)
TOKENIZER_ID = "kdlab-char-v1"


def tokenize(text: str) -> list[int]:
    try:
        return [_CHAR_TO_ID[ch] for ch in text]
    except KeyError as e:
        raise EncodingError(f"character {e.args[0]!r} is outside the fixed alphabet") from None


def detokenize(tokens) -> str:
    out = []
    for t in tokens:
        t = int(t)
        if t in (PAD_ID, BOS_ID, EOS_ID, SEP_ID):
            continue
        if t not in _ID_TO_CHAR:
            raise VocabularyError(f"token id {t} is outside vocabulary of size {VOCAB_SIZE}")
        out.append(_ID_TO_CHAR[t])
    return "".join(out)


@dataclass
class Sample:
    prompt: list[int]  # BOS + prompt text + SEP
    response: list[int]  # response text + EOS
    domain: bool
    family: str
    corrupted: bool
    prompt_text: str = ""
    response_text: str = ""

    def __len__(self):
        return len(self.prompt) + len(self.response)


def make_sample(prompt_text, response_text, domain, family, corrupted=False) -> Sample:
    if not prompt_text or not response_text:
        raise ConfigError(f"{family}: prompt and response must be non-empty")
    return Sample(
        prompt=[BOS_ID] + tokenize(prompt_text) + [SEP_ID],
        response=tokenize(response_text) + [EOS_ID],
        domain=domain,
        family=family,
        corrupted=corrupted,
        prompt_text=prompt_text,
        response_text=response_text,
    )


# ---------------------------------------------------------------------------
# task families

_LETTERS = string.ascii_lowercase
_COLORS = ["red", "blue", "green", "teal", "pink", "gray"]
_SIZES = ["xs", "s", "m", "l", "xl"]


def _rand_word(rng, lo=3, hi=5):
    n = int(rng.integers(lo, hi + 1))
    return "".join(_LETTERS[i] for i in rng.integers(0, 26, size=n))


def _gen_copy(rng):
    s = _rand_word(rng)
    return f"copy: {s}", s


def _solve_copy(prompt):
    return prompt.removeprefix("copy: ")


def _gen_reverse(rng):
    s = _rand_word(rng)
    return f"reverse: {s}", s[::-1]


def _solve_reverse(prompt):
    return prompt.removeprefix("reverse: ")[::-1]


def _gen_sort(rng):
    s = _rand_word(rng, 5, 5)  # fixed length: output slot i = rank-i selection
    return f"sort: {s}", "".join(sorted(s))


def _solve_sort(prompt):
    return "".join(sorted(prompt.removeprefix("sort: ")))


def _gen_mod_add(rng):
    # small addend keeps the answer table learnable at this scale; the rule
    # (and the solver) still covers arbitrary operands
    a = int(rng.integers(0, 100))
    b = int(rng.integers(1, 4))
    return f"add: {a}+{b} mod 10", str((a + b) % 10)


def _solve_mod_add(prompt):
    expr = prompt.removeprefix("add: ").removesuffix(" mod 10")
    a, b = expr.split("+")
    return str((int(a) + int(b)) % 10)


def _balanced(s):
    depth = 0
    for ch in s:
        depth += 1 if ch == "(" else -1
        if depth < 0:
            return False
    return depth == 0


def _gen_paren(rng):
    # short strings have so few distinct forms that they get memorized
    # verbatim; lengths of 10+ force the actual counting rule
    n = int(rng.integers(5, 9)) * 2
    want_balanced = bool(rng.integers(0, 2))
    while True:
        if want_balanced:
            # random walk conditioned to stay a valid prefix and close fully
            s, depth = [], 0
            for left in range(n, 0, -1):
                open_ok = depth < left  # room to close what we open
                close_ok = depth > 0
                if open_ok and (not close_ok or rng.integers(0, 2)):
                    s.append("(")
                    depth += 1
                else:
                    s.append(")")
                    depth -= 1
            s = "".join(s)
        else:
            s = "".join("()"[i] for i in rng.integers(0, 2, size=n))
        if _balanced(s) == want_balanced:
            return f"paren: {s}", "yes" if want_balanced else "no"


def _solve_paren(prompt):
    return "yes" if _balanced(prompt.removeprefix("paren: ")) else "no"


def _gen_lookup(rng):
    keys = ["color", "size", "price"]
    values = {
        "color": _COLORS[rng.integers(0, len(_COLORS))],
        "size": _SIZES[rng.integers(0, len(_SIZES))],
        "price": str(int(rng.integers(1, 100))),
    }
    order = list(rng.permutation(keys))
    listing = " ".join(f"{k}={values[k]}" for k in order)
    ask = keys[rng.integers(0, len(keys))]
    return f"item: {listing} | get {ask}", values[ask]


def _solve_lookup(prompt):
    listing, ask = prompt.removeprefix("item: ").split(" | get ")
    pairs = dict(kv.split("=") for kv in listing.split(" "))
    return pairs[ask]


def _gen_extract(rng):
    key = ["color", "size"][rng.integers(0, 2)]
    value = {
        "color": _COLORS[rng.integers(0, len(_COLORS))],
        "size": _SIZES[rng.integers(0, len(_SIZES))],
    }[key]
    junk = lambda: "".join((_LETTERS + string.digits)[i] for i in rng.integers(0, 36, size=3))
    return f"find {key} in: {junk()} {key}:{value} {junk()}", value


def _solve_extract(prompt):
    key, rest = prompt.removeprefix("find ").split(" in: ")
    for tok in rest.split(" "):
        if tok.startswith(key + ":"):
            return tok[len(key) + 1 :]
    raise ValueError(f"no {key} tag in {prompt!r}")


def _gen_price_sum(rng):
    a = int(rng.integers(1, 50))
    b = int(rng.integers(1, 50))
    return f"prices: {a}+{b}", str(a + b)


def _solve_price_sum(prompt):
    parts = prompt.removeprefix("prices: ").split("+")
    return str(sum(int(p) for p in parts))


@dataclass
class Family:
    name: str
    domain: bool
    gen: callable
    solve: callable
    chance: float  # expected exact-match rate of a random guesser


FAMILIES = {
    f.name: f
    for f in [
        Family("copy", False, _gen_copy, _solve_copy, 0.0),
        Family("reverse", False, _gen_reverse, _solve_reverse, 0.0),
        Family("sort-letters", False, _gen_sort, _solve_sort, 0.0),
        Family("modular-addition", False, _gen_mod_add, _solve_mod_add, 0.1),
        Family("parenthesis-balance", False, _gen_paren, _solve_paren, 0.5),
        Family("attr-lookup", True, _gen_lookup, _solve_lookup, 0.0),
        Family("attr-extract", True, _gen_extract, _solve_extract, 0.0),
        Family("price-sum", True, _gen_price_sum, _solve_price_sum, 0.0),
    ]
}

GENERAL_FAMILIES = [f.name for f in FAMILIES.values() if not f.domain]
DOMAIN_FAMILIES = [f.name for f in FAMILIES.values() if f.domain]


def _pool_of(prompt_text):
    """Deterministic train/eval pool split over prompt strings."""
    return "eval" if zlib.crc32(prompt_text.encode()) % 5 == 0 else "train"


def generate_corpus(families, n_samples, seed, noise_rate, split="train") -> list[Sample]:
    """Deterministic synthetic corpus.

    Prompts are partitioned into disjoint train/eval pools by a hash of the
    prompt string, so train and eval corpora never share a prompt no matter
    which seeds produced them. Noise replaces a response with a random
    same-length string and marks the sample corrupted.
    """
    if not 0 <= noise_rate < 1:
        raise ConfigError(f"noise_rate must be in [0, 1), got {noise_rate}")
    if split not in ("train", "eval"):
        raise ConfigError(f"split must be train or eval, got {split!r}")
    fams = []
    for name in families:
        if name not in FAMILIES:
            raise ConfigError(f"unknown family {name!r}; known: {sorted(FAMILIES)}")
        fams.append(FAMILIES[name])

    rng = np.random.default_rng(seed)
    samples = []
    while len(samples) < n_samples:
        fam = fams[rng.integers(0, len(fams))]
        prompt_text, response_text = fam.gen(rng)
        if _pool_of(prompt_text) != split:
            continue
        corrupted = bool(rng.random() < noise_rate) if noise_rate > 0 else False
        if corrupted:
            ids = rng.integers(0, len(ALPHABET), size=len(response_text))
            response_text = "".join(ALPHABET[i] for i in ids)
        samples.append(make_sample(prompt_text, response_text, fam.domain, fam.name, corrupted))
    return samples


@dataclass
class PackedBatch:
    tokens: np.ndarray  # (B, T) int64
    loss_mask: np.ndarray  # (B, T) uint8, 1 on response tokens incl. EOS
    row_mask: np.ndarray  # (B, T) uint8, 1 on all real tokens
    domain_flags: np.ndarray  # (B,) bool
    boundaries: list = field(default_factory=list)  # per row: [(start, end) per sample]

    @property
    def n_rows(self):
        return self.tokens.shape[0]

    @property
    def pad_fraction(self):
        return 1.0 - float(self.row_mask.sum()) / self.row_mask.size

    def select(self, idx):
        return PackedBatch(
            tokens=self.tokens[idx],
            loss_mask=self.loss_mask[idx],
            row_mask=self.row_mask[idx],
            domain_flags=self.domain_flags[idx],
            boundaries=[self.boundaries[i] for i in idx],
        )


def pack(samples, seq_len, seed=None, one_per_row=False) -> PackedBatch:
    """Greedy first-fit packing into domain-homogeneous rows of seq_len.

    Samples are placed in input order; rows are shuffled afterwards when a
    seed is given. Remainders are PAD-filled with both masks zero. With
    one_per_row each sample keeps its own row, so attention never crosses
    sample boundaries.
    """
    for s in samples:
        if len(s) > seq_len:
            raise PackingError(
                f"sample of {len(s)} tokens exceeds row length {seq_len} "
                f"(family {s.family}, prompt {s.prompt_text[:40]!r})"
            )

    if one_per_row:
        ordered = [[len(s), [s]] for s in samples]
    else:
        # (used, [samples]) per open row, kept separate per domain flag
        open_rows = {False: [], True: []}
        for s in samples:
            placed = False
            for row in open_rows[s.domain]:
                if row[0] + len(s) <= seq_len:
                    row[1].append(s)
                    row[0] += len(s)
                    placed = True
                    break
            if not placed:
                open_rows[s.domain].append([len(s), [s]])
        ordered = open_rows[False] + open_rows[True]

    n = len(ordered)
    tokens = np.full((n, seq_len), PAD_ID, dtype=np.int64)
    loss_mask = np.zeros((n, seq_len), dtype=np.uint8)
    row_mask = np.zeros((n, seq_len), dtype=np.uint8)
    domain_flags = np.zeros(n, dtype=bool)
    boundaries = []
    for i, (_, members) in enumerate(ordered):
        pos = 0
        spans = []
        domain_flags[i] = members[0].domain
        for s in members:
            ids = s.prompt + s.response
            end = pos + len(ids)
            tokens[i, pos:end] = ids
            row_mask[i, pos:end] = 1
            loss_mask[i, pos + len(s.prompt) : end] = 1
            spans.append((pos, end))
            pos = end
        boundaries.append(spans)

    batch = PackedBatch(tokens, loss_mask, row_mask, domain_flags, boundaries)
    if seed is not None:
        order = np.random.default_rng(seed).permutation(n)
        batch = batch.select(order)
    return batch


def write_corpus(path, samples):
    with open(path, "w", encoding="utf-8") as f:
        for s in samples:
            rec = {
                "prompt": s.prompt_text,
                "response": s.response_text,
                "domain": s.domain,
                "family": s.family,
                "corrupted": s.corrupted,
            }
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_corpus(path) -> list[Sample]:
    samples = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                samples.append(
                    make_sample(rec["prompt"], rec["response"], rec["domain"], rec["family"], rec["corrupted"])
                )
            except (ValueError, KeyError, TypeError) as e:
                raise CorpusParseError(path, line_no, f"malformed corpus line ({e})") from None
    return samples


def token_count(samples):
    return sum(len(s) for s in samples)


def mix_corpora(general, domain, domain_token_frac=0.10, seed=0) -> list[Sample]:
    """All general samples plus enough domain samples that the domain share
    of tokens lands on the requested fraction; order is then shuffled."""
    if not 0 < domain_token_frac < 1:
        raise ConfigError(f"domain_token_frac must be in (0, 1), got {domain_token_frac}")
    g_tokens = token_count(general)
    target = domain_token_frac / (1.0 - domain_token_frac) * g_tokens
    picked, acc = [], 0
    for s in domain:
        if acc >= target:
            break
        picked.append(s)
        acc += len(s)
    if acc < 0.8 * target:
        raise ConfigError(
            f"domain corpus too small for a {domain_token_frac:.0%} token mix "
            f"(have {acc} domain tokens, need about {int(target)})"
        )
    mixed = list(general) + picked
    order = np.random.default_rng(seed).permutation(len(mixed))
    return [mixed[i] for i in order]
