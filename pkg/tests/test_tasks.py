import json

import pytest
from pydantic import ValidationError

from project.errors import DatasetFormatError, GenerationError, SequenceLengthError
from project.tasks import (
    BoolExample,
    SupervisedRecord,
    build_supervised_record,
    format_prompt,
    forward_chain_answer,
    load_boolq_jsonl,
    synth_generate,
    write_boolq_jsonl,
)


def test_tokenizer_maps_bytes_and_specials(tokenizer):
    assert tokenizer.tokenize("Hi") == [72, 105]
    assert tokenizer.tokenize("é") == [0xC3, 0xA9]
    assert tokenizer.detokenize([tokenizer.BOS, 72, 105, tokenizer.YES, tokenizer.EOS, tokenizer.PAD]) == b"HiYes"
    assert tokenizer.decode([tokenizer.NO, 46]) == "No."
    assert tokenizer.answer_token(True) == 259 and tokenizer.answer_token(False) == 260


def test_prompt_layout():
    prompt = format_prompt(BoolExample(passage="P.", question="Q?", answer=True))
    assert prompt.endswith("\nPassage: P.\nQuestion: Q?\nAnswer:")


def test_supervised_record_positions(tokenizer):
    record = build_supervised_record(BoolExample(passage="a", question="b", answer=False), tokenizer, 256)
    assert record.prompt_tokens[0] == tokenizer.BOS
    assert record.last_position == len(record.prompt_tokens) - 1
    assert record.full_sequence()[-2:] == [tokenizer.NO, tokenizer.EOS]


def test_supervised_record_rejects_wrong_last_position():
    with pytest.raises(ValidationError):
        SupervisedRecord(prompt_tokens=(1, 2, 3), answer_token=259, last_position=1)


def test_overlong_prompt_is_rejected(tokenizer):
    example = BoolExample(passage="x" * 300, question="y?", answer=True)
    with pytest.raises(SequenceLengthError) as info:
        build_supervised_record(example, tokenizer, 256)
    assert info.value.length > 255


def test_bool_example_is_strict():
    with pytest.raises(ValidationError):
        BoolExample(passage="p", question="q", answer="true")
    with pytest.raises(ValidationError):
        BoolExample(passage="", question="q", answer=True)


@pytest.mark.parametrize("chain", [1, 2])
def test_synthetic_examples_are_balanced_and_consistent(chain):
    examples = synth_generate(3, 40, 12, 4, chain)
    assert sum(ex.answer for ex in examples) == 20
    for ex in examples:
        assert forward_chain_answer(ex.passage, ex.question) == ex.answer


def test_synthetic_generation_is_seeded():
    assert synth_generate(5, 10, 8, 3, 2) == synth_generate(5, 10, 8, 3, 2)
    assert synth_generate(5, 10, 8, 3, 2) != synth_generate(6, 10, 8, 3, 2)


def test_world_seed_shares_vocabulary_across_splits():
    def entities(examples):
        return {ex.question.split()[1] for ex in examples}

    train = synth_generate(1, 60, 6, 3, 2, world_seed=0)
    held_out = synth_generate(2, 60, 6, 3, 2, world_seed=0)
    assert len(entities(train) | entities(held_out)) <= 6
    assert entities(train) & entities(held_out)


def test_synthetic_parameter_errors():
    with pytest.raises(GenerationError):
        synth_generate(0, 3, 8, 3, 2)
    with pytest.raises(GenerationError):
        synth_generate(0, 4, 8, 3, 3)
    with pytest.raises(GenerationError):
        synth_generate(0, 4, 2, 3, 2)


def test_forward_chaining_composes_rules():
    passage = "Koba is a tesi. Every tesi is lomu. Every lomu is rine."
    assert forward_chain_answer(passage, "Is Koba rine?")
    assert not forward_chain_answer(passage, "Is Tesi lomu?")
    assert not forward_chain_answer("Koba is lomu.", "Is Koba rine?")


def test_forward_chaining_rejects_unknown_sentences():
    with pytest.raises(ValueError):
        forward_chain_answer("Koba likes tesi.", "Is Koba tesi?")


def test_jsonl_roundtrip_keeps_schema_fields(tmp_path):
    examples = synth_generate(0, 4, 8, 3, 2)
    path = tmp_path / "data.jsonl"
    write_boolq_jsonl(path, examples)
    first = json.loads(path.read_text().splitlines()[0])
    assert list(first) == ["question", "passage", "answer"]
    assert load_boolq_jsonl(path) == examples


def test_loader_skips_blank_lines(tmp_path):
    path = tmp_path / "data.jsonl"
    path.write_text('\n{"question": "q", "passage": "p", "answer": false}\n\n')
    assert load_boolq_jsonl(path) == [BoolExample(question="q", passage="p", answer=False)]


@pytest.mark.parametrize(
    "line, reason",
    [
        ("{not json", "invalid JSON"),
        ("[1, 2]", "expected a JSON object"),
        ('{"question": "q", "passage": "p"}', "invalid record"),
    ],
)
def test_loader_reports_line_numbers(tmp_path, line, reason):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"question": "q", "passage": "p", "answer": true}\n' + line + "\n")
    with pytest.raises(DatasetFormatError, match=f"line 2: {reason}") as info:
        load_boolq_jsonl(path)
    assert info.value.line_number == 2


def test_chain_two_passages_agree_on_one_world():
    examples = synth_generate(1, 200, 8, 4, 2, world_seed=0) + synth_generate(2, 200, 8, 4, 2, world_seed=0)
    categories, answers = {}, {}
    for ex in examples:
        for sentence in ex.passage.split(". "):
            words = sentence.rstrip(".").split()
            if words[1:3] == ["is", "a"]:
                categories.setdefault(words[0], set()).add(words[3])
        answers.setdefault(ex.question, set()).add(ex.answer)
    assert all(len(found) == 1 for found in categories.values())
    assert all(len(found) == 1 for found in answers.values())


def test_many_words_grow_longer_instead_of_running_out():
    examples = synth_generate(0, 2, 4100, 4, 2)
    assert len(examples) == 2
    entity = examples[0].question.split()[1]
    assert len(entity) == 8
    for ex in examples:
        assert forward_chain_answer(ex.passage, ex.question) == ex.answer
