from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moelab.evalkit import (
    COT_MARKER,
    AnswerMode,
    EvalReport,
    PromptError,
    SuiteSpec,
    SyntheticSpec,
    TaskFormatError,
    TaskRecord,
    TaskScore,
    Tokenizer,
    assemble_prompt,
    build_synthetic,
    evaluate,
    exact_match,
    extract_answer,
    format_table,
    gen_synthetic_tasks,
    load_task_dir,
    normalized_score,
    read_task_file,
    stub_generator,
    write_task_file,
)

GOLDEN = Path(__file__).parent / "golden"
SMALL = SyntheticSpec(n_train=200, n_test=20, n_finetune=16)


# -- prompts ----------------------------------------------------------------------------


def test_prompt_matches_golden_two_shot():
    rec = TaskRecord("copy", "copy the sequence", "e f", "e f", (("a b", "a b"), ("c d", "c d")))
    assert assemble_prompt(rec) == (GOLDEN / "prompt_two_shot.txt").read_text(encoding="utf-8")


def test_prompt_matches_golden_zero_shot():
    rec = TaskRecord("add", "add the numbers", "3 + 4", "7", (("1 + 1", "2"),))
    assert assemble_prompt(rec, 0) == (GOLDEN / "prompt_zero_shot.txt").read_text(encoding="utf-8")


def test_prompt_rejects_missing_exemplars():
    with pytest.raises(PromptError):
        assemble_prompt(TaskRecord("t", "i", "x", "y"), 1)


def test_tokenizer_round_trip_and_specials():
    tok = Tokenizer(["b", "a", "b"])
    assert tok.vocab[:3] == ["<pad>", "<eos>", "<unk>"] and len(tok) == 5
    assert tok.decode(tok.encode("a b a")) == "a b a"
    assert tok.encode("zzz") == [tok.unk_id]
    assert tok.decode([tok.encode("a")[0], tok.pad_id, tok.eos_id, tok.encode("b")[0]]) == "a"


# -- scoring ----------------------------------------------------------------------------


def test_extract_cot_answer():
    gen = f"2 + 3 = 5 . {COT_MARKER} 5 ."
    assert extract_answer(gen, AnswerMode.COT) == "5"
    assert extract_answer(f"{COT_MARKER} 1 . {COT_MARKER} 2", "CoT") == "2"
    assert extract_answer("no marker here", "CoT") == ""
    assert extract_answer("  7 \n", "Direct") == "7"


@given(st.text(max_size=20))
def test_direct_extraction_is_trim(s):
    assert extract_answer(s, "Direct") == s.strip()


@given(st.text(alphabet="ab ", max_size=10))
def test_cot_extraction_after_marker(s):
    assert extract_answer(f"junk {COT_MARKER} {s}", "CoT") == extract_answer(s, "Direct").removesuffix(".").rstrip()


@given(st.text(max_size=10), st.text(max_size=10))
def test_exact_match_symmetric_and_reflexive(a, b):
    assert exact_match(a, a) == 1
    assert exact_match(a, b) == exact_match(b, a)
    assert exact_match(a.upper(), a.lower(), case_sensitive=False) == exact_match(a.upper().lower(), a.lower())


def test_exact_match_case():
    assert exact_match("Yes", "yes") == 0
    assert exact_match("Yes", "yes", case_sensitive=False) == 1


@given(st.floats(0, 99.5), st.floats(0, 100))
def test_normalized_score_anchors(baseline, raw):
    assert abs(normalized_score(baseline, baseline)) < 1e-9
    assert abs(normalized_score(100.0, baseline) - 100.0) < 1e-9
    assert normalized_score(raw, baseline) <= 100.0 + 1e-9


def test_normalized_score_rejects_full_baseline():
    with pytest.raises(ValueError):
        normalized_score(50, 100)


# -- reports ----------------------------------------------------------------------------


def _four_suites():
    return [
        SuiteSpec("A", ("a1", "a2")),
        SuiteSpec("B", ("b1",), random_baseline={"b1": 50.0}),
        SuiteSpec("C", ("c1",), answer_mode="CoT", random_baseline={"c1": 20.0}),
        SuiteSpec("D", ("d1", "d2"), random_baseline={"d1": 25.0}),
    ]


def test_macro_average_by_hand():
    per = {
        "a1": TaskScore(8, 10), "a2": TaskScore(4, 10),
        "b1": TaskScore(3, 4), "c1": TaskScore(6, 10),
        "d1": TaskScore(1, 2), "d2": TaskScore(0, 5),
    }
    rep = EvalReport(per, _four_suites())
    # A: (80 + 40)/2 = 60, B: (75-50)/50*100 = 50, C: (60-20)/80*100 = 50,
    # D: ((50-25)/75*100 + 0)/2 = 16.666...
    assert abs(rep.normalized_average - (60 + 50 + 50 + 50 / 3) / 4) < 1e-9
    assert rep.suite_accuracy(_four_suites()[3]) == 25.0
    again = EvalReport.from_dict(rep.to_dict())
    assert again.normalized_average == rep.normalized_average


def test_table_layout():
    per = {t: TaskScore(1, 1) for t in ["a1", "a2", "b1", "c1", "d1", "d2"]}
    table = format_table([("m", EvalReport(per, _four_suites()))])
    header = table.splitlines()[0]
    assert header.split(" | ")[1:] == ["A Direct", "B Direct", "C CoT", "D Direct", "Norm. Avg."]
    assert table.splitlines()[2].split(" | ")[-1].strip() == "100.0"


def _synthetic():
    return build_synthetic(0, SMALL)


def test_stub_scores_perfect_and_empty_scores_negative_baseline():
    ts = _synthetic()
    k = {t: s.k_shot for s in ts.suites for t in s.tasks}
    rep = evaluate(stub_generator(ts.test, k), ts.suites, ts.test)
    assert all(s.accuracy == 100.0 for s in rep.per_task.values())
    assert abs(rep.normalized_average - 100.0) < 1e-9
    empty = evaluate(lambda ps: [""] * len(ps), ts.suites, ts.test)
    for suite in ts.suites:
        expect = sum(-100 * suite.baseline(t) / (100 - suite.baseline(t)) for t in suite.tasks) / len(suite.tasks)
        assert abs(empty.suite_normalized(suite) - expect) < 1e-9


def test_evaluate_uses_suite_k_shot():
    seen = []
    suite = SuiteSpec("S", ("t",), k_shot=0)
    recs = {"t": [TaskRecord("t", "do", "x", "y", (("p", "q"),))]}
    evaluate(lambda ps: seen.extend(ps) or ["y"] * len(ps), [suite], recs)
    assert seen == ["do\nInput: x\nOutput:"]


def test_evaluate_missing_task_raises():
    with pytest.raises(KeyError):
        evaluate(lambda ps: ps, [SuiteSpec("S", ("nope",))], {})


# -- task files and synthetic data ------------------------------------------------------


def test_task_file_round_trip(tmp_path):
    recs = [TaskRecord("t", "i", "x", "y", (("a", "b"),), "CoT"), TaskRecord("t", "i", "x2", "y2")]
    assert read_task_file(write_task_file(tmp_path / "t.train.jsonl", recs)) == recs


def test_task_file_errors_carry_line_numbers(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"task_name": "t", "instruction": "i", "input": "x", "target": "y"}\n{"task_name": "t"}\n')
    with pytest.raises(TaskFormatError, match=":2:"):
        read_task_file(p)


def test_gen_synthetic_is_byte_identical(tmp_path):
    gen_synthetic_tasks(3, SMALL, tmp_path / "a")
    gen_synthetic_tasks(3, SMALL, tmp_path / "b")
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "manifest.json" in files and "copy.train.jsonl" in files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    gen_synthetic_tasks(4, SMALL, tmp_path / "c")
    assert (tmp_path / "a" / "copy.train.jsonl").read_bytes() != (tmp_path / "c" / "copy.train.jsonl").read_bytes()


def test_load_task_dir_matches_built_set(tmp_path):
    ts = gen_synthetic_tasks(1, SMALL, tmp_path)
    loaded = load_task_dir(tmp_path)
    assert loaded.train == ts.train and loaded.test == ts.test
    assert loaded.splits == ts.splits and loaded.suites == ts.suites
    assert loaded.tokenizer().vocab == ts.tokenizer().vocab
    with pytest.raises(FileNotFoundError):
        load_task_dir(tmp_path / "missing")


def test_synthetic_answers_are_correct():
    ts = _synthetic()
    for r in ts.train["copy"][:50]:
        assert r.target == r.input
    for r in ts.train["reverse"][:50]:
        assert r.target.split() == r.input.split()[::-1]
    for r in ts.train["lookup"][:50]:
        words = r.input.split()
        q = words[-1]
        # linear scan over key/value pairs
        table = {}
        for i in range(0, len(words) - 2, 2):
            table[words[i]] = words[i + 1]
        assert r.target == table[q]
    for r in ts.train["add"][:50]:
        a, _, b = r.input.split()
        assert r.target == str((int(a) + int(b)) % SMALL.modulus)


def test_cot_targets_carry_marker():
    ts = _synthetic()
    for r in ts.train["add_cot"][:50] + ts.test["add_cot"]:
        assert r.answer_mode is AnswerMode.COT and COT_MARKER in r.target
        a, _, b = r.input.split()
        assert extract_answer(r.target, "CoT") == str((int(a) + int(b)) % SMALL.modulus)


def test_copy_test_inputs_unseen_in_training():
    ts = _synthetic()
    for name in ("copy", "reverse", "lookup", "copy_alt"):
        train_inputs = {r.input for r in ts.train[name]}
        assert not train_inputs & {r.input for r in ts.test[name]}, name


def test_split_sizes_and_held_out():
    ts = _synthetic()
    assert set(ts.held_out()) == {"copy_alt", "reverse_alt", "lookup_alt", "add_alt"}
    assert len(ts.train["copy"]) == SMALL.n_train and len(ts.train["copy_alt"]) == SMALL.n_finetune
    assert all(len(v) == SMALL.n_test for v in ts.test.values())
    for s in ts.suites:
        assert set(s.tasks) <= set(ts.held_out()) or s.name == "Arith"


def test_exemplars_never_echo_the_query():
    ts = _synthetic()
    for r in ts.test["copy"] + ts.train["lookup"][:100]:
        assert all(ex[0] != r.input for ex in r.exemplars)
