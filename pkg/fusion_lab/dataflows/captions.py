"""
Templated captions, questions and task prompts for shape scenes.

Every answer is derived from the Scene record, so ground truth is machine
checkable.
"""

from typing import Callable, List, Tuple

from ..errors import ContractError
from ..tensor.rng import Rng
from .scenes import Scene, SceneObject
from .tokenizer import COLORS, COUNT_WORDS, SHAPES

CAPTION_PROMPTS = [
    "a short caption:",
    "describe the image briefly.",
    "what does the image show?",
    "write a short caption for this picture.",
]

VQA_PROMPT_TEMPLATES = [
    "{question} short answer:",
    "question: {question} answer:",
    "{question} answer using a single word.",
]


def _relation(first: SceneObject, second: SceneObject) -> str:
    if first.row < second.row:
        return "above"
    if first.row > second.row:
        return "below"
    return "left of" if first.col < second.col else "right of"


def caption_scene(scene: Scene) -> str:
    """e.g. "a red circle above a blue square and a green triangle"."""
    phrases = [f"a {o.color} {o.shape}" for o in scene.objects]
    if len(phrases) == 1:
        return phrases[0]
    text = f"{phrases[0]} {_relation(scene.objects[0], scene.objects[1])} {phrases[1]}"
    for phrase in phrases[2:]:
        text += f" and {phrase}"
    return text


def candidate_questions(scene: Scene) -> List[Tuple[str, str]]:
    """All (question, answer) pairs whose answer is unambiguous for this scene."""
    qa = []
    shapes = [o.shape for o in scene.objects]
    colors = [o.color for o in scene.objects]
    for o in scene.objects:
        if shapes.count(o.shape) == 1:
            qa.append((f"what color is the {o.shape}?", o.color))
        if colors.count(o.color) == 1:
            qa.append((f"what shape is the {o.color} object?", o.shape))
    qa.append(("how many objects are there?", COUNT_WORDS[len(scene.objects)]))
    for shape in SHAPES:
        for color in COLORS:
            present = (shape, color) in scene.combinations()
            qa.append((f"is there a {color} {shape}?", "yes" if present else "no"))
    return qa


def sample_questions(scene: Scene, rng: Rng, max_questions: int = 3) -> List[Tuple[str, str]]:
    """Draw 1..max_questions distinct QA pairs; attribute questions come first in the pool."""
    pool = candidate_questions(scene)
    attribute = [qa for qa in pool if not qa[0].startswith("is there")]
    presence = [qa for qa in pool if qa[0].startswith("is there")]
    count = int(rng.integers(1, max_questions + 1))
    picked = [attribute[i] for i in rng.permutation(len(attribute))[:count]]
    if len(picked) < count:
        picked += [presence[i] for i in rng.permutation(len(presence))[: count - len(picked)]]
    return picked


def answer_question(scene: Scene, question: str) -> str:
    """Ground-truth answer of a templated question, recomputed from the scene."""
    for q, a in candidate_questions(scene):
        if q == question:
            return a
    raise ContractError(f"Question '{question}' has no unambiguous answer for this scene")


def caption_prompt(index: int) -> str:
    return CAPTION_PROMPTS[index % len(CAPTION_PROMPTS)]


def vqa_prompt(question: str, index: int) -> str:
    return VQA_PROMPT_TEMPLATES[index % len(VQA_PROMPT_TEMPLATES)].format(question=question)


def prompt_sampler(task: str) -> Callable[[Rng, str], str]:
    """Per-iteration prompt choice ("randomly sample one prompt") for a task."""
    if task == "caption":
        return lambda rng, _question: caption_prompt(int(rng.integers(0, len(CAPTION_PROMPTS))))
    if task == "vqa":
        return lambda rng, question: vqa_prompt(question, int(rng.integers(0, len(VQA_PROMPT_TEMPLATES))))
    raise ContractError(f"Unknown task '{task}'")
