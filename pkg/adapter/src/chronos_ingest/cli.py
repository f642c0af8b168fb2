"""Command line for trajectory ingestion."""

from __future__ import annotations

import argparse
import sys

from chronos_ingest.adapter import EndpointConfig, load_questions, sample_trajectories


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chronos-ingest", description=__doc__)
    parser.add_argument("--questions", required=True, help="questions JSONL (question_id, prompt, gold_answer?)")
    parser.add_argument("--output", required=True, help="trajectory JSONL to create or resume")
    parser.add_argument("--base-url", required=True, help="OpenAI-compatible endpoint base URL")
    parser.add_argument("--model", required=True)
    parser.add_argument("--n", type=int, default=1, help="samples per question")
    parser.add_argument("--temperature", type=float, default=0.6)
    parser.add_argument("--top-p", type=float, default=0.95)
    parser.add_argument("--top-k", type=int, default=20)
    parser.add_argument("--max-tokens", type=int, default=2048)
    parser.add_argument("--logprobs", type=int, default=20, help="top-k logprobs recorded per step (file k_stat)")
    parser.add_argument("--template", choices=["math", "choice", "plain"], default="math")
    parser.add_argument("--concurrency", type=int, default=4)
    parser.add_argument("--seed-base", type=int, default=0)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    endpoint = EndpointConfig(
        base_url=args.base_url,
        model=args.model,
        temperature=args.temperature,
        top_p=args.top_p,
        top_k=args.top_k,
        max_tokens=args.max_tokens,
        logprobs=args.logprobs,
        prompt_template=args.template,
        concurrency=args.concurrency,
        seed_base=args.seed_base,
    )
    try:
        questions = load_questions(args.questions)
        result = sample_trajectories(questions, args.n, endpoint, args.output)
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(
        f"{result.output_path}: wrote {result.written}, skipped {result.skipped} existing, "
        f"{result.failed} failed" + (f" (see {result.failures_path})" if result.failures_path else "")
    )
    return 0 if result.failed == 0 else 1


if __name__ == "__main__":
    sys.exit(main())
