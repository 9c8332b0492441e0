"""Run the whole pipeline on one short passage with the offline mock model.

Writes a run directory, then prints the QA-CoT records, the four-option
items and the run counters. Pass --backend http to use a real
OpenAI-compatible endpoint (DSCORE_API_BASE, DSCORE_API_KEY, DSCORE_MODEL).

    python demos/walkthrough.py --out /tmp/qasynth-demo
"""

import argparse
import json
import tempfile
import time
from pathlib import Path

from qasynth.config import load_config
from qasynth.pipeline import FILES, run_pipeline
from qasynth.records import read_jsonl

PASSAGE = """\
Coronaviruses are enveloped RNA viruses that infect birds and mammals. The 2019 outbreak began in Wuhan,
where early cases were linked to a seafood market. Researchers sequenced the genome within weeks and found
it shared about 80 percent identity with SARS. Transmission occurs mainly through respiratory droplets
produced when an infected person coughs or sneezes. The median incubation period was estimated at 5.2 days,
although some patients showed symptoms after two weeks. Older adults and people with chronic conditions
faced a higher risk of severe pneumonia. Public health agencies recommended hand washing, masks, and
physical distancing to slow the spread. Vaccine development started immediately, using both mRNA and viral
vector platforms.
"""


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", help="output directory (default: a temporary one)")
    ap.add_argument("--backend", choices=("mock", "http"), default="mock")
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    out = Path(args.out or tempfile.mkdtemp(prefix="qasynth-demo-"))
    out.mkdir(parents=True, exist_ok=True)
    src = out / "covid.txt"
    src.write_text(" ".join(PASSAGE.split()), encoding="utf-8")
    print(f"input: {len(PASSAGE.split())} words -> {src}")

    # three explicit + three implicit questions per segment, one segment for this text
    cfg = load_config(overrides=[
        f"ingest.inputs=['{src}']",
        "ingest.max_tokens=512",
        f"run.out_dir={out / 'runs'}",
        "run.run_id=demo",
        f"run.seed={args.seed}",
        f"backend.kind={args.backend}",
        "generate.n_explicit=3",
        "generate.n_implicit=3",
    ])
    started = time.perf_counter()
    result = run_pipeline(cfg)
    print(f"run finished in {time.perf_counter() - started:.2f}s with exit code {result.exit_code}\n")

    for rec in read_jsonl(result.run_dir / FILES["sft"]):
        print("Q:", rec["instruction"])
        print("A:", rec["output"].replace("\n", "\n   "), "\n")

    print("four-option items:")
    for rec in read_jsonl(result.run_dir / FILES["mcq"]):
        print(" ", rec["stem"])
        for letter, option in zip("ABCD", rec["options"]):
            mark = "*" if letter == rec["answer_letter"] else " "
            print(f"    {mark} {letter}. {option}")

    print("\ncounters:")
    print(json.dumps(result.manifest.counters, indent=1))
    print(f"artifacts in {result.run_dir}")


if __name__ == "__main__":
    main()
