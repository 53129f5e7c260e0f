"""
Byte-level tokenization, the yes/no question prompt protocol, a synthetic inferential
task generator, and BoolQ-format JSONL ingestion.
"""

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    StrictBool,
    StrictStr,
    ValidationError,
    model_validator,
)

from project.errors import DatasetFormatError, GenerationError, SequenceLengthError

logger = logging.getLogger(__name__)

SYSTEM_INSTRUCTION = 'Answer the question with only "Yes" or "No" based on the passage.'
ANSWER_MARKER = "Answer:"


class BoolExample(BaseModel):
    """One BoolQ-shaped record: a passage, a yes/no question about it, and the label."""

    model_config = ConfigDict(frozen=True)

    passage: StrictStr = Field(min_length=1)
    question: StrictStr = Field(min_length=1)
    answer: StrictBool


class ByteTokenizer:
    """
    256 byte tokens plus five specials. YES and NO are dedicated ids so an answer is a
    single-token target.
    """

    PAD = 256
    BOS = 257
    EOS = 258
    YES = 259
    NO = 260
    vocab_size = 261

    _rendered = {YES: b"Yes", NO: b"No"}

    def tokenize(self, text: Union[str, bytes]) -> list[int]:
        data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        return list(data)

    def detokenize(self, ids: Iterable[int]) -> bytes:
        """
        Bytes back from ids. YES/NO render as the words they stand for; PAD, BOS and EOS
        are skipped.
        """
        out = bytearray()
        for token in ids:
            if token < 256:
                out.append(token)
            elif token in self._rendered:
                out += self._rendered[token]
        return bytes(out)

    def decode(self, ids: Iterable[int]) -> str:
        return self.detokenize(ids).decode("utf-8", errors="replace")

    def answer_token(self, answer: bool) -> int:
        return self.YES if answer else self.NO


class SupervisedRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    prompt_tokens: tuple[int, ...] = Field(min_length=1)
    answer_token: int
    last_position: int
    eos_token: int = ByteTokenizer.EOS

    @model_validator(mode="after")
    def check_last_position(self) -> "SupervisedRecord":
        if self.last_position != len(self.prompt_tokens) - 1:
            raise ValueError("last_position must index the final prompt token")
        return self

    def full_sequence(self) -> list[int]:
        """Prompt, answer and end-of-text: the Stage-1 language-modeling sequence."""
        return [*self.prompt_tokens, self.answer_token, self.eos_token]


def format_prompt(example: BoolExample) -> str:
    return (
        f"{SYSTEM_INSTRUCTION}\n"
        f"Passage: {example.passage}\n"
        f"Question: {example.question}\n"
        f"{ANSWER_MARKER}"
    )


def build_supervised_record(
    example: BoolExample, tokenizer: ByteTokenizer, max_seq: int
) -> SupervisedRecord:
    """
    Tokenizes the prompt with a BOS prefix. The prompt may use at most max_seq - 1
    positions so the answer token still fits in a training sequence.
    """
    tokens = [tokenizer.BOS, *tokenizer.tokenize(format_prompt(example))]
    if len(tokens) > max_seq - 1:
        raise SequenceLengthError(
            f"prompt of {len(tokens)} tokens does not fit max_seq - 1 = {max_seq - 1}",
            len(tokens),
        )
    return SupervisedRecord(
        prompt_tokens=tuple(tokens),
        answer_token=tokenizer.answer_token(example.answer),
        last_position=len(tokens) - 1,
        eos_token=tokenizer.EOS,
    )


_SYLLABLES = ("ba", "ko", "ri", "mu", "te", "lo", "ne", "si", "da", "vu", "pe", "zo", "fi", "ga", "hu", "ja")


def _make_words(rng: np.random.Generator, count: int) -> list[str]:
    """
    count distinct words of equal length. Words grow by a syllable until there are at
    least four candidates per word, so rejection sampling always terminates quickly.
    """
    syllables = 2
    if count > 96:
        syllables = 3
        while len(_SYLLABLES) ** syllables < 4 * count:
            syllables += 1
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < count:
        word = "".join(rng.choice(_SYLLABLES, size=syllables))
        if word not in seen:
            seen.add(word)
            words.append(word)
    return words


@dataclass(frozen=True)
class _World:
    """Vocabulary plus the world's fixed memberships and category rules (as index sets)."""

    entities: list[str]
    categories: list[str]
    properties: list[str]
    membership: list[int]
    rules: list[frozenset[int]]

    def membership_fact(self, entity: int) -> str:
        return f"{self.entities[entity]} is a {self.categories[self.membership[entity]]}."


def _build_world(rng: np.random.Generator, n_entities: int, n_categories: int, n_properties: int) -> _World:
    words = _make_words(rng, n_entities + n_categories + n_properties)
    # entities are spread evenly over the categories
    membership = (rng.permutation(n_entities) % n_categories).tolist()
    half = n_properties // 2
    first = frozenset(rng.permutation(n_properties)[:half].tolist())
    # the first two categories split the properties, so every property holds for some
    # category and fails for another
    rules = [first, frozenset(range(n_properties)) - first]
    rules += [frozenset(rng.permutation(n_properties)[:half].tolist()) for _ in range(n_categories - 2)]
    return _World(
        entities=[w.capitalize() for w in words[:n_entities]],
        categories=words[n_entities : n_entities + n_categories],
        properties=words[n_entities + n_categories :],
        membership=membership,
        rules=rules,
    )


def _pick(rng: np.random.Generator, options: Sequence):
    return options[rng.integers(len(options))]


def synth_generate(
    seed: int,
    n: int,
    n_entities: int,
    n_properties: int,
    chain: int,
    *,
    n_categories: Optional[int] = None,
    distractor_facts: int = 2,
    distractor_rules: int = 1,
    world_seed: Optional[int] = None,
) -> list[BoolExample]:
    """
    Generates n balanced yes/no examples over a world fixed by the seed.

    The world puts every entity in one category and gives every category a fixed set of
    properties. Every membership fact and rule a passage states is true in the world.
    With chain=2 the passage states the entity's category, a rule for that category and
    a counterpart rule for another category that uses the asked property or the other
    one, so only composing the fact with the right rule answers the question. With
    chain=1 the passage states properties of the entity and of a counterpart entity
    directly, drawn per example. Distractor facts are memberships of other entities and
    distractor rules are about other categories. A world_seed fixes the world
    independently of seed, so held-out splits can share it with the training split.

    Example:
        example = synth_generate(7, 2, 4, 2, 2)[0]
        forward_chain_answer(example.passage, example.question) == example.answer
        > True
    """
    if n < 2 or n % 2:
        raise GenerationError(f"n must be an even count of at least 2, got {n}")
    if chain not in (1, 2):
        raise GenerationError(f"chain must be 1 or 2, got {chain}")
    n_categories = n_properties if n_categories is None else n_categories
    needed_entities = distractor_facts + (1 if chain == 2 else 2)
    if n_entities < max(2, needed_entities):
        raise GenerationError(
            f"{n_entities} entities cannot balance labels with {distractor_facts} distractor facts"
        )
    if n_properties < 2 or n_categories < 2:
        raise GenerationError("at least two properties and two categories are required")

    rng = np.random.default_rng(seed)
    world = _build_world(
        rng if world_seed is None else np.random.default_rng(world_seed),
        n_entities,
        n_categories,
        n_properties,
    )
    categories, properties = world.categories, world.properties

    labels = np.array([True] * (n // 2) + [False] * (n // 2))[rng.permutation(n)]
    examples = []
    for label in labels.tolist():
        e_idx, *others = rng.permutation(n_entities)[:needed_entities].tolist()
        entity = world.entities[e_idx]

        if chain == 2:
            c_idx = world.membership[e_idx]
            owned = sorted(world.rules[c_idx])
            if label:
                p_idx = _pick(rng, owned)
                rule_p = c_idx
                c2_idx, q_idx = _pick(
                    rng,
                    [(k, j) for k in range(n_categories) if k != c_idx for j in sorted(world.rules[k]) if j != p_idx],
                )
                rule_q = c2_idx
            else:
                p_idx = _pick(rng, sorted(set(range(n_properties)) - world.rules[c_idx]))
                q_idx = _pick(rng, owned)
                rule_q = c_idx
                rule_p = _pick(rng, [k for k in range(n_categories) if k != c_idx and p_idx in world.rules[k]])
            sentences = [
                world.membership_fact(e_idx),
                f"Every {categories[rule_p]} is {properties[p_idx]}.",
                f"Every {categories[rule_q]} is {properties[q_idx]}.",
            ]
            distractor_entities = others
            rule_categories = [k for k in range(n_categories) if k != c_idx]
        else:
            p_idx, q_idx = rng.permutation(n_properties)[:2].tolist()
            counterpart = world.entities[others[0]]
            if label:
                sentences = [f"{entity} is {properties[p_idx]}.", f"{counterpart} is {properties[q_idx]}."]
            else:
                sentences = [f"{entity} is {properties[q_idx]}.", f"{counterpart} is {properties[p_idx]}."]
            distractor_entities = others[1:]
            rule_categories = list(range(n_categories))

        sentences += [world.membership_fact(d_idx) for d_idx in distractor_entities]
        for _ in range(distractor_rules):
            k = _pick(rng, rule_categories)
            sentences.append(f"Every {categories[k]} is {properties[_pick(rng, sorted(world.rules[k]))]}.")

        order = rng.permutation(len(sentences))
        passage = " ".join(sentences[i] for i in order)
        question = f"Is {entity} {properties[p_idx]}?"
        if forward_chain_answer(passage, question) != label:
            raise GenerationError(f"generated example disagrees with forward chaining: {passage!r}")
        examples.append(BoolExample(passage=passage, question=question, answer=label))
    return examples


_RULE = re.compile(r"^Every (\w+) is (\w+)$")
_MEMBERSHIP = re.compile(r"^(\w+) is an? (\w+)$")
_PROPERTY = re.compile(r"^(\w+) is (\w+)$")
_QUESTION = re.compile(r"^Is (\w+) (\w+)\?$")


def forward_chain_answer(passage: str, question: str) -> bool:
    """
    Decides a synthetic question by forward chaining over the passage: membership and
    property facts are closed under the "Every X is Y" rules, and the answer is whether
    the asked pair was derived.
    """
    match = _QUESTION.match(question.strip())
    if match is None:
        raise ValueError(f"unrecognized question: {question!r}")
    subject, asked = match.groups()

    facts: set[tuple[str, str]] = set()
    rules: dict[str, set[str]] = {}
    for sentence in (s.strip() for s in passage.split(".")):
        if not sentence:
            continue
        if m := _RULE.match(sentence):
            rules.setdefault(m.group(1), set()).add(m.group(2))
        elif m := _MEMBERSHIP.match(sentence):
            facts.add(m.groups())
        elif m := _PROPERTY.match(sentence):
            facts.add(m.groups())
        else:
            raise ValueError(f"unrecognized sentence: {sentence!r}")

    frontier = set(facts)
    while frontier:
        derived = {
            (entity, consequent)
            for entity, term in frontier
            for consequent in rules.get(term, ())
        } - facts
        facts |= derived
        frontier = derived
    return (subject, asked) in facts


def load_boolq_jsonl(path: Union[str, Path]) -> list[BoolExample]:
    """Reads one JSON object per line with question, passage and answer; blank lines are skipped."""
    examples = []
    with open(path, encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as error:
                raise DatasetFormatError(f"invalid JSON: {error.msg}", line_number) from error
            if not isinstance(record, dict):
                raise DatasetFormatError("expected a JSON object", line_number)
            try:
                examples.append(BoolExample.model_validate(record))
            except ValidationError as error:
                raise DatasetFormatError(
                    f"invalid record: {error.errors()[0]['msg']}", line_number
                ) from error
    logger.info("Loaded %d examples from %s", len(examples), path)
    return examples


def write_boolq_jsonl(path: Union[str, Path], examples: Sequence[BoolExample]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for example in examples:
            record = {"question": example.question, "passage": example.passage, "answer": example.answer}
            handle.write(json.dumps(record, ensure_ascii=False) + "\n")
