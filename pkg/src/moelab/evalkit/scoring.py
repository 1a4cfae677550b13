from __future__ import annotations

from .records import AnswerMode

COT_MARKER = "The answer is"


def extract_answer(generated: str, mode: AnswerMode | str, marker: str = COT_MARKER) -> str:
    """Direct: the trimmed generation. CoT: text after the last ``marker``,
    trimmed with one trailing period removed; "" when the marker is absent."""
    mode = AnswerMode(mode)
    if mode is AnswerMode.DIRECT:
        return generated.strip()
    idx = generated.rfind(marker)
    if idx < 0:
        return ""
    answer = generated[idx + len(marker):].strip()
    if answer.endswith("."):
        answer = answer[:-1].rstrip()
    return answer


def exact_match(pred: str, target: str, case_sensitive: bool = True) -> int:
    a, b = pred.strip(), target.strip()
    if not case_sensitive:
        a, b = a.lower(), b.lower()
    return int(a == b)


def normalized_score(raw: float, baseline: float) -> float:
    """Rescale accuracy so random guessing maps to 0 and perfect to 100."""
    if baseline >= 100:
        raise ValueError(f"baseline must be below 100, got {baseline}")
    return 100.0 * (raw - baseline) / (100.0 - baseline)
