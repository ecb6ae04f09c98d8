"""Corpus parsing, tagging-scheme conversion, vocabularies, embeddings, stats.

Corpus file format (UTF-8): each record is N lines ``token<TAB>slot-tag``
followed by one line ``#intent<TAB>label1[#label2...]``; records separated by
one blank line. The parser also tolerates space-separated fields and extra
blank lines; serialization always emits the canonical TAB form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

INTENT_MARKER = "#intent"
PAD = "<pad>"
UNK = "<unk>"

BIO2 = "bio2"
BIOES = "bioes"
SCHEMES = (BIO2, BIOES)


class ParseError(Exception):
    """Malformed corpus input; message carries the offending line number."""


class ConversionError(Exception):
    """Tag sequence is invalid under the claimed scheme."""


class EmbeddingError(Exception):
    """Malformed pretrained-embedding file."""


@dataclass(frozen=True)
class Utterance:
    """Token sequence with aligned slot tags and one-or-more intent labels."""

    tokens: tuple[str, ...]
    slot_tags: tuple[str, ...]
    intents: tuple[str, ...]  # unique, in file order; first one is the training target

    def __post_init__(self):
        if len(self.tokens) == 0:
            raise ParseError("empty utterance")
        if len(self.tokens) != len(self.slot_tags):
            raise ParseError(
                f"{len(self.tokens)} tokens vs {len(self.slot_tags)} slot tags"
            )
        if len(self.intents) == 0:
            raise ParseError("utterance without intent labels")


def _split_tag(tag: str) -> tuple[str, str]:
    """'B-artist' -> ('B', 'artist'); 'O' -> ('O', '')."""
    if tag == "O":
        return "O", ""
    if len(tag) > 2 and tag[1] == "-":
        return tag[0], tag[2:]
    return tag, ""


def validate_tags(tags, scheme: str, lines=None) -> None:
    """Raise if ``tags`` is not a legal sequence under ``scheme``.

    ``lines`` optionally maps positions to input line numbers for messages.
    """
    if scheme not in SCHEMES:
        raise ConversionError(f"unknown tagging scheme {scheme!r}")

    def fail(i, msg):
        where = f" (line {lines[i]})" if lines else f" (position {i})"
        raise ConversionError(msg + where)

    allowed = {"O", "B", "I"} if scheme == BIO2 else {"O", "B", "I", "E", "S"}
    prev_p, prev_t = "O", ""
    for i, tag in enumerate(tags):
        p, t = _split_tag(tag)
        if p not in allowed or (p != "O" and not t):
            fail(i, f"illegal tag {tag!r} under {scheme}")
        if p == "I" and not (prev_p in ("B", "I") and prev_t == t):
            fail(i, f"tag {tag!r} does not continue a span")
        if scheme == BIOES:
            if p == "E" and not (prev_p in ("B", "I") and prev_t == t):
                fail(i, f"tag {tag!r} has no opener")
            if prev_p in ("B", "I") and not (p in ("I", "E") and t == prev_t):
                fail(i, f"span {prev_t!r} left unclosed before {tag!r}")
        prev_p, prev_t = p, t
    if scheme == BIOES and prev_p in ("B", "I"):
        fail(len(tags) - 1, f"sequence ends inside span {prev_t!r}")


def bio_to_bioes(tags) -> list[str]:
    """Semantics-preserving BIO2 -> BIOES conversion."""
    validate_tags(tags, BIO2)
    out = []
    for i, tag in enumerate(tags):
        p, t = _split_tag(tag)
        nxt_p, nxt_t = _split_tag(tags[i + 1]) if i + 1 < len(tags) else ("O", "")
        continues = nxt_p == "I" and nxt_t == t
        if p == "B":
            out.append(f"B-{t}" if continues else f"S-{t}")
        elif p == "I":
            out.append(f"I-{t}" if continues else f"E-{t}")
        else:
            out.append("O")
    return out


def bioes_to_bio(tags) -> list[str]:
    """Inverse of :func:`bio_to_bioes`."""
    validate_tags(tags, BIOES)
    mapping = {"S": "B", "B": "B", "I": "I", "E": "I"}
    out = []
    for tag in tags:
        p, t = _split_tag(tag)
        out.append("O" if p == "O" else f"{mapping[p]}-{t}")
    return out


def parse_corpus(text: str, scheme: str = BIOES) -> list[Utterance]:
    """Parse a corpus stream; validates tag legality under ``scheme``."""
    if scheme not in SCHEMES:
        raise ParseError(f"unknown tagging scheme {scheme!r}")
    utterances: list[Utterance] = []
    tokens: list[str] = []
    tags: list[str] = []
    tag_lines: list[int] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        if line.startswith(INTENT_MARKER):
            fields = line.split("\t") if "\t" in line else line.split()
            if len(fields) != 2 or fields[0] != INTENT_MARKER or not fields[1]:
                raise ParseError(f"line {lineno}: malformed intent line {line!r}")
            labels = []
            for label in fields[1].split("#"):
                if not label:
                    raise ParseError(f"line {lineno}: empty intent label in {fields[1]!r}")
                if label not in labels:
                    labels.append(label)
            if not tokens:
                raise ParseError(f"line {lineno}: intent line without any tokens")
            try:
                validate_tags(tags, scheme, lines=tag_lines)
            except ConversionError as exc:
                raise ParseError(str(exc)) from exc
            utterances.append(Utterance(tuple(tokens), tuple(tags), tuple(labels)))
            tokens, tags, tag_lines = [], [], []
        else:
            fields = line.split("\t") if "\t" in line else line.split()
            if len(fields) != 2 or not fields[0] or not fields[1]:
                raise ParseError(f"line {lineno}: expected 'token<TAB>tag', got {line!r}")
            tokens.append(fields[0])
            tags.append(fields[1])
            tag_lines.append(lineno)
    if tokens:
        raise ParseError(f"record starting near line {tag_lines[0]} has no intent line")
    return utterances


def serialize_corpus(utterances) -> str:
    """Canonical text form; parse(serialize(x)) == x and bit-exact roundtrip."""
    records = []
    for u in utterances:
        lines = [f"{tok}\t{tag}" for tok, tag in zip(u.tokens, u.slot_tags)]
        lines.append(f"{INTENT_MARKER}\t{'#'.join(u.intents)}")
        records.append("\n".join(lines))
    return "\n\n".join(records) + "\n"


def load_corpus(path, scheme: str = BIOES) -> list[Utterance]:
    with open(path, encoding="utf-8") as f:
        return parse_corpus(f.read(), scheme)


class Vocabulary:
    """Token/char/slot-tag/intent maps with dense ids, deterministic by first occurrence."""

    def __init__(self, tokens, chars, slot_tags, intents):
        self.tokens = [PAD, UNK] + [t for t in tokens if t not in (PAD, UNK)]
        self.chars = [PAD, UNK] + [c for c in chars if c not in (PAD, UNK)]
        self.slot_tags = list(slot_tags)
        self.intents = list(intents)
        self.token_index = {t: i for i, t in enumerate(self.tokens)}
        self.char_index = {c: i for i, c in enumerate(self.chars)}
        self.slot_index = {t: i for i, t in enumerate(self.slot_tags)}
        self.intent_index = {t: i for i, t in enumerate(self.intents)}

    PAD_ID = 0
    UNK_ID = 1

    @classmethod
    def from_corpus(cls, utterances) -> "Vocabulary":
        tokens: dict[str, None] = {}
        chars: dict[str, None] = {}
        slots: dict[str, None] = {}
        intents: dict[str, None] = {}
        for u in utterances:
            for tok in u.tokens:
                tokens.setdefault(tok, None)
                for ch in tok:
                    chars.setdefault(ch, None)
            for tag in u.slot_tags:
                slots.setdefault(tag, None)
            for label in u.intents:
                intents.setdefault(label, None)
        return cls(list(tokens), list(chars), list(slots), list(intents))

    def token_ids(self, tokens) -> np.ndarray:
        return np.array([self.token_index.get(t, self.UNK_ID) for t in tokens], dtype=np.intp)

    def char_ids(self, token: str) -> np.ndarray:
        return np.array([self.char_index.get(c, self.UNK_ID) for c in token], dtype=np.intp)

    def slot_ids(self, tags) -> np.ndarray:
        try:
            return np.array([self.slot_index[t] for t in tags], dtype=np.intp)
        except KeyError as exc:
            raise KeyError(f"slot tag {exc.args[0]!r} not in vocabulary") from None

    def intent_id(self, label: str) -> int:
        if label not in self.intent_index:
            raise KeyError(f"intent {label!r} not in vocabulary")
        return self.intent_index[label]

    def to_dict(self) -> dict:
        return {
            "tokens": self.tokens[2:],
            "chars": self.chars[2:],
            "slot_tags": self.slot_tags,
            "intents": self.intents,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(d["tokens"], d["chars"], d["slot_tags"], d["intents"])


def load_embeddings(text: str, vocab: Vocabulary, dim: int):
    """Pretrained word vectors for ``vocab.tokens``.

    Returns (matrix |tokens| x dim, found bool mask). Rows for tokens absent
    from the file are zero and flagged not-found; the embedding layer
    substitutes its trainable unknown-word row for those.
    """
    matrix = np.zeros((len(vocab.tokens), dim), dtype=np.float64)
    found = np.zeros(len(vocab.tokens), dtype=bool)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        fields = raw.split()
        if len(fields) != dim + 1:
            raise EmbeddingError(
                f"line {lineno}: expected token + {dim} values, got {len(fields)} fields"
            )
        token = fields[0]
        idx = vocab.token_index.get(token)
        if idx is None or idx in (vocab.PAD_ID, vocab.UNK_ID):
            continue
        try:
            matrix[idx] = [float(v) for v in fields[1:]]
        except ValueError as exc:
            raise EmbeddingError(f"line {lineno}: {exc}") from None
        found[idx] = True
    return matrix, found


def load_embeddings_file(path, vocab: Vocabulary, dim: int):
    with open(path, encoding="utf-8") as f:
        return load_embeddings(f.read(), vocab, dim)


@dataclass
class CorpusStats:
    vocab_size: int
    average_length: float
    intent_count: int
    slot_count: int
    split_sizes: dict[str, int] = field(default_factory=dict)


def corpus_stats(splits: dict[str, list[Utterance]]) -> CorpusStats:
    """Exact counts: vocab from the train split, labels/lengths over all splits."""
    train = splits.get("train", [])
    vocab_tokens = {tok for u in train for tok in u.tokens}
    slots = {tag for us in splits.values() for u in us for tag in u.slot_tags}
    intents = {lab for us in splits.values() for u in us for lab in u.intents}
    total_utts = sum(len(us) for us in splits.values())
    total_tokens = sum(len(u.tokens) for us in splits.values() for u in us)
    avg = total_tokens / total_utts if total_utts else 0.0
    return CorpusStats(
        vocab_size=len(vocab_tokens),
        average_length=avg,
        intent_count=len(intents),
        slot_count=len(slots),
        split_sizes={name: len(us) for name, us in splits.items()},
    )
