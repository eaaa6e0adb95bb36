"""
Task metrics: corpus BLEU-4 (captioning) and exact-match accuracy (VQA).
"""

from typing import Hashable, List, Sequence

from sacrebleu.metrics import BLEU

from ..errors import ContractError
from .tokenizer import strip_special

MAX_ORDER = 4

# token sequences are joined with spaces, so no further tokenization
_CORPUS_BLEU = BLEU(tokenize="none", smooth_method="none", effective_order=False, max_ngram_order=MAX_ORDER)


def _as_line(tokens: Sequence[Hashable]) -> str:
    return " ".join(str(t) for t in tokens)


def bleu4(candidates: Sequence[Sequence[Hashable]], references: Sequence[Sequence[Hashable]]) -> float:
    """
    Corpus-level BLEU with uniform 1-4 gram weights, clipped n-gram counts,
    brevity penalty exp(1 - r/c) when c < r, and no smoothing.

    Args:
        candidates: Token sequences (ids or words, none containing whitespace)
        references: One reference per candidate

    Returns:
        float: Score in [0, 1]; 0 when any n-gram order has no match
    """
    if len(candidates) == 0:
        raise ContractError("bleu4 needs at least one candidate")
    if len(candidates) != len(references):
        raise ContractError(f"Got {len(candidates)} candidates for {len(references)} references")
    if any(len(r) == 0 for r in references):
        raise ContractError("bleu4 references must be non-empty")

    score = _CORPUS_BLEU.corpus_score(
        [_as_line(c) for c in candidates],
        [[_as_line(r) for r in references]],
    )
    return score.score / 100.0


def exact_match_accuracy(predictions: Sequence[Sequence[int]], answers: Sequence[Sequence[int]]) -> float:
    """Fraction of predictions equal to their answer after stripping pad/start/end."""
    if len(predictions) != len(answers):
        raise ContractError(f"Got {len(predictions)} predictions for {len(answers)} answers")
    if not predictions:
        return 0.0
    hits = sum(strip_special(p) == strip_special(a) for p, a in zip(predictions, answers))
    return hits / len(predictions)


def answer_vocabulary(answers: Sequence[Sequence[int]]) -> List[tuple]:
    return sorted({tuple(strip_special(a)) for a in answers})
