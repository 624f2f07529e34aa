"""Synthetic paired-modality corpora with a planted class signal.

Each utterance carries a discrete token sequence (text side), a discrete
code sequence (speech side) and a class label. Per class, a small set of
"planted" symbols is reserved in each vocabulary, disjoint across classes;
at generation time every position carries a planted symbol of the
utterance's class with probability `salience_prob`, otherwise a background
symbol that is planted for no class. The planted map travels with the
corpus as ground truth, so attention tests can check whether trained models
actually find the signal.

File format (UTF-8, line oriented):
  line 1    JSON header holding the generating spec and the planted map
  line 2..  one utterance per line: ``label|tok,tok,...|code,code,...``
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .errors import (
    CorpusParseError,
    CorpusSpecError,
    CorpusValidationError,
    StratificationError,
)


@dataclass(frozen=True)
class Utterance:
    text_tokens: tuple[int, ...]
    frame_codes: tuple[int, ...]
    label: int


@dataclass(frozen=True)
class CorpusSpec:
    """Knobs that fully determine a generated corpus (together with n)."""

    classes: int = 4
    vocab_text: int = 120
    vocab_speech: int = 240
    text_len: tuple[int, int] = (10, 30)
    speech_len: tuple[int, int] = (40, 120)
    salient_per_class: int = 6
    salience_prob: float = 0.3
    seed: int = 0
    # When > 0, tokens of up to this many earlier same-class utterances are
    # prepended to the text side, imitating spliced dialog history.
    context_utterances: int = 0

    def validate(self) -> None:
        if self.classes < 1:
            raise CorpusSpecError("classes must be >= 1")
        if self.salient_per_class < 1:
            raise CorpusSpecError("salient_per_class must be >= 1")
        for name, vocab in (("vocab_text", self.vocab_text), ("vocab_speech", self.vocab_speech)):
            if vocab < 1:
                raise CorpusSpecError(f"{name} must be >= 1")
            if self.salient_per_class * self.classes > vocab:
                raise CorpusSpecError(
                    f"salient_per_class * classes exceeds {name} "
                    f"({self.salient_per_class} * {self.classes} > {vocab})"
                )
        for name, (lo, hi) in (("text_len", self.text_len), ("speech_len", self.speech_len)):
            if lo < 1 or hi < lo:
                raise CorpusSpecError(f"{name} range must satisfy 1 <= min <= max, got {lo}..{hi}")
        if not 0.0 <= self.salience_prob <= 1.0:
            raise CorpusSpecError("salience_prob must be within [0, 1]")
        if self.context_utterances < 0:
            raise CorpusSpecError("context_utterances must be >= 0")


@dataclass(frozen=True)
class Corpus:
    spec: CorpusSpec
    utterances: tuple[Utterance, ...]
    planted_tokens: tuple[tuple[int, ...], ...]
    planted_codes: tuple[tuple[int, ...], ...]

    def __len__(self) -> int:
        return len(self.utterances)

    def class_counts(self) -> list[int]:
        counts = [0] * self.spec.classes
        for utt in self.utterances:
            counts[utt.label] += 1
        return counts


def _plant_symbols(rng: np.random.Generator, vocab: int, classes: int, per_class: int):
    perm = rng.permutation(vocab)
    planted = tuple(
        tuple(sorted(int(s) for s in perm[k * per_class : (k + 1) * per_class]))
        for k in range(classes)
    )
    taken = {s for group in planted for s in group}
    background = np.array(sorted(set(range(vocab)) - taken), dtype=np.int64)
    return planted, background


def _draw_sequence(
    rng: np.random.Generator,
    length: int,
    planted: tuple[int, ...],
    background: np.ndarray,
    salience_prob: float,
) -> tuple[int, ...]:
    use_planted = rng.random(length) < salience_prob
    planted_arr = np.array(planted, dtype=np.int64)
    out = np.empty(length, dtype=np.int64)
    n_planted = int(use_planted.sum())
    out[use_planted] = planted_arr[rng.integers(0, len(planted_arr), size=n_planted)]
    n_background = length - n_planted
    if n_background:
        if background.size == 0:
            raise CorpusSpecError(
                "no background symbols left: salient_per_class * classes fills the vocabulary"
            )
        out[~use_planted] = background[rng.integers(0, background.size, size=n_background)]
    return tuple(int(v) for v in out)


def generate(spec: CorpusSpec, n: int) -> Corpus:
    """Draw n utterances, each class non-empty, fully determined by spec.seed."""
    spec.validate()
    if n < spec.classes:
        raise CorpusSpecError(f"n must be at least the class count ({n} < {spec.classes})")
    rng = np.random.default_rng(spec.seed)

    planted_tokens, background_tokens = _plant_symbols(
        rng, spec.vocab_text, spec.classes, spec.salient_per_class
    )
    planted_codes, background_codes = _plant_symbols(
        rng, spec.vocab_speech, spec.classes, spec.salient_per_class
    )

    labels = rng.integers(0, spec.classes, size=n)
    missing = sorted(set(range(spec.classes)) - set(int(v) for v in labels))
    for slot, cls in enumerate(missing):
        labels[slot] = cls

    utterances = []
    for i in range(n):
        label = int(labels[i])
        text_len = int(rng.integers(spec.text_len[0], spec.text_len[1] + 1))
        speech_len = int(rng.integers(spec.speech_len[0], spec.speech_len[1] + 1))
        tokens = _draw_sequence(
            rng, text_len, planted_tokens[label], background_tokens, spec.salience_prob
        )
        codes = _draw_sequence(
            rng, speech_len, planted_codes[label], background_codes, spec.salience_prob
        )
        utterances.append(Utterance(tokens, codes, label))

    if spec.context_utterances > 0:
        utterances = _splice_history(utterances, spec.context_utterances)

    return Corpus(spec, tuple(utterances), planted_tokens, planted_codes)


def _splice_history(utterances: list[Utterance], depth: int) -> list[Utterance]:
    seen_by_class: dict[int, list[Utterance]] = {}
    spliced = []
    for utt in utterances:
        history = seen_by_class.setdefault(utt.label, [])
        prefix: tuple[int, ...] = ()
        for prior in history[-depth:]:
            prefix = prefix + prior.text_tokens
        spliced.append(replace(utt, text_tokens=prefix + utt.text_tokens))
        history.append(utt)
    return spliced


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save(corpus: Corpus, path) -> None:
    header = asdict(corpus.spec)
    header["text_len"] = list(corpus.spec.text_len)
    header["speech_len"] = list(corpus.spec.speech_len)
    header["planted_tokens"] = [list(g) for g in corpus.planted_tokens]
    header["planted_codes"] = [list(g) for g in corpus.planted_codes]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for utt in corpus.utterances:
            tokens = ",".join(str(t) for t in utt.text_tokens)
            codes = ",".join(str(c) for c in utt.frame_codes)
            fh.write(f"{utt.label}|{tokens}|{codes}\n")


def _parse_id_list(field: str, line_no: int, what: str) -> tuple[int, ...]:
    if not field:
        raise CorpusParseError(f"line {line_no}: empty {what} sequence")
    try:
        return tuple(int(part) for part in field.split(","))
    except ValueError:
        raise CorpusParseError(f"line {line_no}: non-integer id in {what} sequence") from None


def load(path) -> Corpus:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise CorpusParseError("line 1: missing header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorpusParseError(f"line 1: malformed header ({exc.msg})") from None

    try:
        planted_tokens = tuple(tuple(int(s) for s in g) for g in header.pop("planted_tokens"))
        planted_codes = tuple(tuple(int(s) for s in g) for g in header.pop("planted_codes"))
        header["text_len"] = tuple(header["text_len"])
        header["speech_len"] = tuple(header["speech_len"])
        spec = CorpusSpec(**header)
    except (KeyError, TypeError) as exc:
        raise CorpusParseError(f"line 1: header missing or unknown field ({exc})") from None
    spec.validate()

    utterances = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("|")
        if len(parts) != 3:
            raise CorpusParseError(f"line {line_no}: expected 3 '|'-separated fields, got {len(parts)}")
        try:
            label = int(parts[0])
        except ValueError:
            raise CorpusParseError(f"line {line_no}: non-integer label {parts[0]!r}") from None
        tokens = _parse_id_list(parts[1], line_no, "token")
        codes = _parse_id_list(parts[2], line_no, "code")
        if not 0 <= label < spec.classes:
            raise CorpusValidationError(
                f"line {line_no}: label {label} out of range for {spec.classes} classes"
            )
        for t in tokens:
            if not 0 <= t < spec.vocab_text:
                raise CorpusValidationError(
                    f"line {line_no}: token id {t} outside vocabulary {spec.vocab_text}"
                )
        for code in codes:
            if not 0 <= code < spec.vocab_speech:
                raise CorpusValidationError(
                    f"line {line_no}: code id {code} outside vocabulary {spec.vocab_speech}"
                )
        utterances.append(Utterance(tokens, codes, label))
    return Corpus(spec, tuple(utterances), planted_tokens, planted_codes)


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


def split(corpus: Corpus, train_fraction: float, seed: int) -> tuple[Corpus, Corpus]:
    """Stratified, exact partition into (train, heldout).

    Per class the train side receives ceil(fraction * class_size) items;
    the selection is deterministic in the seed and both sides preserve the
    original utterance order.
    """
    if not 0.0 < train_fraction < 1.0:
        raise CorpusSpecError(f"train_fraction must lie strictly in (0, 1), got {train_fraction}")
    by_class: dict[int, list[int]] = {}
    for idx, utt in enumerate(corpus.utterances):
        by_class.setdefault(utt.label, []).append(idx)
    for cls, indices in sorted(by_class.items()):
        if len(indices) < 2:
            raise StratificationError(
                f"class {cls} has {len(indices)} utterance(s); need at least 2 to split"
            )

    rng = np.random.default_rng(seed)
    train_idx: list[int] = []
    heldout_idx: list[int] = []
    for cls in sorted(by_class):
        indices = np.array(by_class[cls], dtype=np.int64)
        order = rng.permutation(len(indices))
        take = math.ceil(train_fraction * len(indices))
        take = min(take, len(indices) - 1)  # keep the heldout side non-empty per class
        train_idx.extend(int(i) for i in indices[order[:take]])
        heldout_idx.extend(int(i) for i in indices[order[take:]])

    def subset(idx: list[int]) -> Corpus:
        chosen = tuple(corpus.utterances[i] for i in sorted(idx))
        return Corpus(corpus.spec, chosen, corpus.planted_tokens, corpus.planted_codes)

    return subset(train_idx), subset(heldout_idx)
