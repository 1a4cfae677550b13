from .prompts import EOS, PAD, UNK, PromptError, Tokenizer, assemble_prompt
from .records import AnswerMode, SuiteSpec, TaskFormatError, TaskRecord, read_task_file, write_task_file
from .report import DecodeConfig, EvalReport, TaskScore, evaluate, format_table, score_task, stub_generator
from .scoring import COT_MARKER, exact_match, extract_answer, normalized_score
from .synthetic import (
    CATALOG,
    HELD_IN,
    HELD_OUT,
    SyntheticSpec,
    TaskSet,
    build_synthetic,
    default_suites,
    gen_synthetic_tasks,
    load_task_dir,
)

__all__ = [
    "AnswerMode",
    "CATALOG",
    "COT_MARKER",
    "DecodeConfig",
    "EOS",
    "EvalReport",
    "HELD_IN",
    "HELD_OUT",
    "PAD",
    "PromptError",
    "SuiteSpec",
    "SyntheticSpec",
    "TaskFormatError",
    "TaskRecord",
    "TaskScore",
    "TaskSet",
    "Tokenizer",
    "UNK",
    "assemble_prompt",
    "build_synthetic",
    "default_suites",
    "evaluate",
    "exact_match",
    "extract_answer",
    "format_table",
    "gen_synthetic_tasks",
    "load_task_dir",
    "normalized_score",
    "read_task_file",
    "score_task",
    "stub_generator",
    "write_task_file",
]
