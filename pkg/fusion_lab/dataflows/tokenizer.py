"""
Closed word-level vocabulary for the synthetic shapes world.
"""

import logging
from typing import Dict, Iterable, List, Sequence

from ..errors import VocabError

logger = logging.getLogger(__name__)

PAD_ID, START_ID, END_ID, UNK_ID = 0, 1, 2, 3
SPECIAL_TOKENS = ["<pad>", "<start>", "<end>", "<unk>"]

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
COUNT_WORDS = ("zero", "one", "two", "three")

_WORDS = (
    list(SHAPES)
    + list(COLORS)
    + list(COUNT_WORDS)
    + [
        # captions
        "a", "an", "the", "and", "above", "below", "left", "right", "of", "next", "to",
        "on", "in", "at", "with", "shape", "shapes", "object", "objects", "scene", "image",
        "picture", "photo", "top", "bottom", "middle", "corner", "there", "is", "are",
        # prompts and questions
        "what", "which", "how", "many", "color", "colour", "describe", "caption", "short",
        "brief", "briefly", "write", "give", "this", "that", "shows", "show", "does",
        "question", "answer", "answers", "word", "single", "using", "please", "you", "see",
        "can", "do", "it", "yes", "no", "any", "some", "for", "contain", "contains",
        "kind", "type", "count", "number", "visible", "sentence", "summarize", "summary",
        "look", "like", "where", "here",
        # punctuation
        "?", ".", ",", ":",
    ]
)

_PUNCTUATION = {"?", ".", ",", ":"}


class Tokenizer:
    """
    Word-level bijection between in-vocabulary text and ids.

    Reserved ids: pad=0, start=1, end=2, unk=3.
    """

    def __init__(self, words: Sequence[str] = _WORDS):
        self.id_to_token: List[str] = list(SPECIAL_TOKENS)
        for word in words:
            if word not in self.id_to_token:
                self.id_to_token.append(word)
        self.token_to_id: Dict[str, int] = {w: i for i, w in enumerate(self.id_to_token)}
        self.unknown_words: List[str] = []

    @property
    def vocab_size(self) -> int:
        return len(self.id_to_token)

    def words(self, text: str) -> List[str]:
        """Whitespace-separated pieces with trailing known punctuation split off."""
        words = []
        for piece in text.lower().split():
            trailing = []
            while len(piece) > 1 and piece[-1] in _PUNCTUATION:
                trailing.insert(0, piece[-1])
                piece = piece[:-1]
            words.append(piece)
            words.extend(trailing)
        return words

    def encode(self, text: str, strict: bool = False) -> List[int]:
        """
        Args:
            text: Whitespace separated words; unrecognised pieces (including
                unknown punctuation) are unknown words
            strict: Raise VocabError on unknown words instead of mapping them to unk
        """
        ids = []
        for word in self.words(text):
            token_id = self.token_to_id.get(word)
            if token_id is None:
                if strict:
                    raise VocabError(f"Word '{word}' is not in the vocabulary")
                logger.warning("Unknown word %r mapped to <unk>", word)
                self.unknown_words.append(word)
                token_id = UNK_ID
            ids.append(token_id)
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        """Inverse of encode; pad/start/end ids are dropped."""
        text = ""
        for token_id in ids:
            token_id = int(token_id)
            if token_id in (PAD_ID, START_ID, END_ID):
                continue
            if not 0 <= token_id < self.vocab_size:
                raise VocabError(f"Token id {token_id} is outside the vocabulary of size {self.vocab_size}")
            word = self.id_to_token[token_id]
            if not text or word in _PUNCTUATION:
                text += word
            else:
                text += " " + word
        return text


_default_tokenizer = Tokenizer()


def get_tokenizer() -> Tokenizer:
    return _default_tokenizer


def tokenize(text: str, strict: bool = False) -> List[int]:
    return _default_tokenizer.encode(text, strict=strict)


def detokenize(ids: Iterable[int]) -> str:
    return _default_tokenizer.decode(ids)


def terminated(ids: Sequence[int]) -> List[int]:
    """Append the end token, the label convention of every pipeline."""
    return list(ids) + [END_ID]


def strip_special(ids: Iterable[int]) -> List[int]:
    return [int(t) for t in ids if int(t) not in (PAD_ID, START_ID, END_ID)]
