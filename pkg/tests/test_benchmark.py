import numpy as np
import pytest

from selfcoherence.benchmark.evaluate import ShapeDetector, evaluate_binding, write_report
from selfcoherence.benchmark.prompts import (
    COARSE,
    BenchmarkVocab,
    TemplateMismatchError,
    VocabularyError,
    decompose_questions,
    generate_prompts,
    paper_preset,
    question_count,
    read_jsonl,
    write_jsonl,
)
from selfcoherence.toy_dit.dataset import DatasetConfig, coarse_prompt, render_scene


class TestPreset:
    def test_counts(self):
        prompts = paper_preset(0)
        counts = {t: sum(p.task == t for p in prompts) for t in ("coarse", "fine", "style")}
        assert counts == {"coarse": 54, "fine": 56, "style": 48}

    def test_question_counts(self):
        for p in paper_preset(0):
            qs = decompose_questions(p)
            assert len(qs) == question_count(p) == {"coarse": 3, "fine": 2, "style": 2}[p.task]

    def test_distinct_and_deterministic(self):
        a, b = paper_preset(3), paper_preset(3)
        assert [p.raw_text for p in a] == [p.raw_text for p in b]
        assert len({p.raw_text for p in a}) == len(a)
        assert [p.raw_text for p in paper_preset(4)] != [p.raw_text for p in a]

    def test_slots_differ_within_prompt(self):
        for p in paper_preset(1):
            (oa, ca), (ob, cb) = p.pair_words()
            assert oa != ob and ca != cb

    def test_jsonl_round_trip(self, tmp_path):
        prompts = paper_preset(0)[:5]
        path = tmp_path / "p.jsonl"
        write_jsonl(prompts, path)
        back = read_jsonl(path)
        assert [pid for pid, _ in back] == [f"coarse-{i:03d}" for i in range(5)]
        assert [p for _, p in back] == prompts


class TestQuestions:
    def test_worked_example(self):
        assert decompose_questions("a blue dog and a red bench in the street") == [
            "a blue dog?",
            "a red bench?",
            "the street?",
        ]

    def test_style_example(self):
        assert decompose_questions("a anime cat and a photorealistic kitchen") == ["a anime cat?", "a photorealistic kitchen?"]

    def test_fine(self):
        assert decompose_questions("an apple with a red stem and a green flesh") == ["a red stem?", "a green flesh?"]

    def test_whitespace_and_period(self):
        assert decompose_questions("  a blue dog  and a red bench. ") == ["a blue dog?", "a red bench?"]

    def test_unknown_template(self):
        with pytest.raises(TemplateMismatchError):
            decompose_questions("dogs playing poker")


class TestGeneration:
    def test_vocabulary_too_small(self):
        vocab = BenchmarkVocab(colors=("red", "blue"), concepts=("dog", "cat"))
        with pytest.raises(VocabularyError):
            generate_prompts([COARSE], vocab, {"coarse": 5}, 0)

    def test_exact_capacity(self):
        vocab = BenchmarkVocab(colors=("red", "blue"), concepts=("dog", "cat"))
        prompts = generate_prompts([COARSE], vocab, {"coarse": 4}, 0)
        assert len({p.raw_text for p in prompts}) == 4


def toy_scene(bindings, boxes, grid=(16, 16), size=7):
    cfg = DatasetConfig(grid=grid, shape_size=size)
    items = [(shape, color, box) for (color, shape), box in zip(bindings, boxes)]
    image, _ = render_scene(grid, size, items)
    return image, coarse_prompt(cfg.vocabulary, bindings)


DETECTOR = ShapeDetector(("square", "disc", "triangle"), 7)
COLORS = ("red", "green", "blue", "yellow")


class TestEvaluate:
    def test_correct_binding(self):
        image, prompt = toy_scene([("red", "square"), ("blue", "disc")], [(0, 0), (8, 8)])
        score = evaluate_binding(image, prompt, DETECTOR, COLORS)
        assert score.accuracy == 1.0 and score.flags == []

    def test_swapped_binding(self):
        image, _ = toy_scene([("blue", "square"), ("red", "disc")], [(0, 0), (8, 8)])
        _, prompt = toy_scene([("red", "square"), ("blue", "disc")], [(0, 0), (8, 8)])
        assert evaluate_binding(image, prompt, DETECTOR, COLORS).accuracy == 0.0

    def test_blank_image_is_flagged(self):
        _, prompt = toy_scene([("red", "square"), ("blue", "disc")], [(0, 0), (8, 8)])
        score = evaluate_binding(np.zeros((16, 16, 3)), prompt, DETECTOR, COLORS)
        assert score.accuracy == 0.0
        assert score.flags == ["pair0:no-region", "pair1:no-region"]

    @pytest.mark.parametrize("shift", [(0, 0), (1, 0), (0, 1), (1, 1)])
    def test_translation_invariant(self, shift):
        dr, dc = shift
        image, prompt = toy_scene([("green", "triangle"), ("yellow", "disc")], [(dr, dc), (8 + dr, 8 + dc)], grid=(17, 17))
        assert evaluate_binding(image, prompt, DETECTOR, COLORS).accuracy == 1.0

    def test_report(self, tmp_path):
        path = tmp_path / "r.csv"
        write_report([("coarse-000", 3, 0.5, ["pair1:no-region"])], path)
        assert path.read_text().splitlines() == ["prompt_id,seed,accuracy,flags", "coarse-000,3,0.500000,pair1:no-region"]
