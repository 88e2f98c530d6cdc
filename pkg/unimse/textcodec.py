"""
Word-level vocabulary and the universal-label codec
Targets are rendered as <polarity> <intensity> <emotion> <eos>
"""

import re
from collections import Counter
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Union

from unimse.errors import LabelError, VocabularyError
from unimse.models import EMOTIONS, DecodedPrediction, Polarity, Task, UniversalLabel

PAD, BOS, EOS, UNK, SEP = "<pad>", "<bos>", "<eos>", "<unk>", "<sep>"
SPECIALS = (PAD, BOS, EOS, UNK, SEP)

INTENSITY_GRID = tuple(round(-3.0 + 0.1 * i, 1) + 0.0 for i in range(61))

_TOKEN_PATTERN = re.compile("|".join(re.escape(s) for s in SPECIALS) + r"|\w+|[^\w\s]")


# ============= LABEL TOKENS =============

def polarity_token(polarity: Union[Polarity, str]) -> str:
    return f"<pol:{Polarity(polarity).value}>"


def emotion_token(emotion: str) -> str:
    return f"<emo:{emotion}>"


def intensity_token(value: float) -> str:
    return f"<int:{round(float(value), 1) + 0.0:+.1f}>"


POLARITY_TOKENS = tuple(polarity_token(p) for p in Polarity)
EMOTION_TOKENS = tuple(emotion_token(e) for e in EMOTIONS)
INTENSITY_TOKENS = tuple(intensity_token(v) for v in INTENSITY_GRID)
RESERVED = SPECIALS + POLARITY_TOKENS + EMOTION_TOKENS + INTENSITY_TOKENS

_INTENSITY_VALUES = {tok: value for tok, value in zip(INTENSITY_TOKENS, INTENSITY_GRID)}
_EMOTION_VALUES = {tok: emo for tok, emo in zip(EMOTION_TOKENS, EMOTIONS)}


def tokenize(text: str) -> List[str]:
    """Lowercase, then split on whitespace and punctuation; special tokens stay whole"""
    return _TOKEN_PATTERN.findall(text.lower())


def normalize(text: str) -> str:
    return " ".join(tokenize(text))


# ============= VOCABULARY =============

class Vocabulary:
    """Bijective token <-> id map with the reserved block first"""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:len(RESERVED)]) != RESERVED:
            raise VocabularyError("Vocabulary does not start with the reserved block")
        if len(set(tokens)) != len(tokens):
            raise VocabularyError("Vocabulary contains duplicate tokens")
        self._tokens = tokens
        self._index: Dict[str, int] = {tok: i for i, tok in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._tokens == other._tokens

    @property
    def tokens(self) -> List[str]:
        return list(self._tokens)

    @property
    def pad_id(self) -> int:
        return self._index[PAD]

    @property
    def bos_id(self) -> int:
        return self._index[BOS]

    @property
    def eos_id(self) -> int:
        return self._index[EOS]

    @property
    def unk_id(self) -> int:
        return self._index[UNK]

    @property
    def sep_id(self) -> int:
        return self._index[SEP]

    def id_of(self, token: str) -> int:
        return self._index.get(token, self.unk_id)

    def token_of(self, token_id: int) -> str:
        if not 0 <= int(token_id) < len(self._tokens):
            raise VocabularyError(f"Token id {token_id} out of range [0, {len(self._tokens)})")
        return self._tokens[int(token_id)]

    def encode_tokens(self, tokens: Iterable[str]) -> List[int]:
        return [self.id_of(tok) for tok in tokens]

    def decode_ids(self, ids: Iterable[int]) -> List[str]:
        return [self.token_of(i) for i in ids]

    # Persistence: one token per line, line number = id
    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_bytes(("\n".join(self._tokens) + "\n").encode("utf-8"))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocabulary":
        path = Path(path)
        if not path.exists():
            raise VocabularyError(f"Vocabulary file not found: {path}")
        lines = path.read_bytes().decode("utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def build_vocab(corpus: Iterable[str]) -> Vocabulary:
    """
    Build a vocabulary from raw documents

    Ids after the reserved block are assigned by (frequency desc, token asc).
    """
    documents = list(corpus)
    if not documents:
        raise VocabularyError("Cannot build a vocabulary from an empty corpus")
    counts = Counter(tok for doc in documents for tok in tokenize(doc))
    words = sorted((tok for tok in counts if tok not in RESERVED), key=lambda t: (-counts[t], t))
    return Vocabulary(list(RESERVED) + words)


def encode_text(text: str, vocab: Vocabulary) -> List[int]:
    """Word ids; words outside the vocabulary map to <unk>"""
    return vocab.encode_tokens(tokenize(text))


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> str:
    return " ".join(vocab.decode_ids(ids))


# ============= UNIVERSAL LABEL CODEC =============

def serialize_ul(label: UniversalLabel) -> List[str]:
    """Complete label -> [polarity, intensity, emotion, EOS] tokens"""
    missing = [name for name in ("polarity", "intensity", "emotion") if getattr(label, name) is None]
    if missing:
        raise LabelError(f"Cannot serialize an incomplete label; missing {', '.join(missing)}")
    if label.emotion not in EMOTIONS:
        raise LabelError(f"Unknown emotion '{label.emotion}'", {"known": list(EMOTIONS)})
    return [
        polarity_token(label.polarity),
        intensity_token(label.intensity),
        emotion_token(label.emotion),
        EOS,
    ]


def encode_target(label: UniversalLabel, vocab: Vocabulary) -> List[int]:
    return vocab.encode_tokens(serialize_ul(label))


def content_tokens(generated: Sequence[str]) -> List[str]:
    """Tokens between an optional leading BOS and the first EOS"""
    tokens = list(generated)
    if tokens and tokens[0] == BOS:
        tokens = tokens[1:]
    if EOS in tokens:
        tokens = tokens[:tokens.index(EOS)]
    return tokens


def decode_prediction(generated: Sequence[str], task: Union[Task, str],
                      fallback: bool = True) -> DecodedPrediction:
    """
    Read the task value out of a generated label sequence

    MSA takes the intensity at position 1, ERC the emotion at position 2. A malformed
    sequence yields 0.0 / neutral with well_formed=False, or raises when fallback is off.
    """
    task = Task(task)
    tokens = content_tokens(generated)
    position, table = (1, _INTENSITY_VALUES) if task == Task.MSA else (2, _EMOTION_VALUES)
    if len(tokens) >= 3 and tokens[position] in table:
        return DecodedPrediction(task=task, value=table[tokens[position]], well_formed=True)
    if not fallback:
        raise LabelError("Malformed generated label", {"task": task.value, "tokens": tokens})
    default = 0.0 if task == Task.MSA else "neutral"
    return DecodedPrediction(task=task, value=default, well_formed=False)

