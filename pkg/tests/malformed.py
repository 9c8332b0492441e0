"""A 50-line corpus of broken qa_cot records, ten of each failure kind."""

import json

KINDS = ("fence", "trailing_comma", "bare_keys", "truncated", "prose")


def _record(i: int) -> dict:
    return {"instruction": f"What does item {i} describe?", "input": "",
            "output": f"Item {i} describes step {i} of the procedure."}


def malformed_line(kind: str, i: int) -> str:
    rec = _record(i)
    text = json.dumps(rec)
    if kind == "fence":
        return "```json " + text + " ```" if i % 2 else "Sure, here it is: ```" + text + "```"
    if kind == "trailing_comma":
        return text[:-1] + ",}" if i % 2 else text[:-1] + ", }"
    if kind == "bare_keys":
        return "{instruction: %s, input: %s, output: %s}" % (
            json.dumps(rec["instruction"]), json.dumps(rec["input"]), json.dumps(rec["output"]))
    if kind == "truncated":
        # even i: cut inside the output string; odd i: cut before the output field exists
        if i % 2 == 0:
            return text[: text.index('"output"') + 20]
        return text[: text.index('"output"') - 2]
    if kind == "prose":
        return f"I'm sorry, I could not produce record number {i} in the requested format."
    raise ValueError(kind)


def corpus() -> list[tuple[str, str]]:
    """(kind, line) pairs; record numbers are unique across the corpus."""
    return [(kind, malformed_line(kind, 10 * k + j)) for k, kind in enumerate(KINDS) for j in range(10)]
