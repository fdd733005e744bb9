#!/usr/bin/env python3
"""
Spectral-bias regression: how long a plain MLP and a Fourier-feature MLP take
to halve the error of the low and high components of sin(x) + sin(8x)
"""

import json
import logging
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src.engine.config import configure_logging, load_environment  # noqa: E402
from src.engine.diag import spectral_bias_run  # noqa: E402

logger = logging.getLogger(__name__)


def main():
    """Main entry point"""
    import argparse

    parser = argparse.ArgumentParser(
        description="Compare error half-lives of low and high frequencies with and without Fourier features",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Five seeds, default budget
  python scripts/spectral_bias.py --seeds 5

  # Quick check with a small network
  python scripts/spectral_bias.py --seeds 2 --steps 500 --width 64
""",
    )
    parser.add_argument("--seeds", type=int, default=5, help="Number of seeds (default: 5)")
    parser.add_argument("--steps", type=int, default=2000, help="Gradient steps per run (default: 2000)")
    parser.add_argument("--learning-rate", type=float, default=1e-3)
    parser.add_argument("--width", type=int, default=128)
    parser.add_argument("--depth", type=int, default=3)
    parser.add_argument("--fourier-scale", type=float, default=2.0, help="Fourier feature scale (default: 2.0)")
    parser.add_argument("--json", action="store_true", help="Print results as JSON")
    args = parser.parse_args()

    load_environment()
    configure_logging()

    rows = []
    for seed in range(args.seeds):
        for label, scale in (("plain", None), ("fourier", args.fourier_scale)):
            result = spectral_bias_run(
                seed,
                fourier_scale=scale,
                steps=args.steps,
                learning_rate=args.learning_rate,
                width=args.width,
                depth=args.depth,
            )
            rows.append(
                {
                    "seed": seed,
                    "model": label,
                    "half_life_low": result.half_life[1],
                    "half_life_high": result.half_life[8],
                    "gap": result.gap(1, 8, args.steps),
                }
            )

    if args.json:
        print(json.dumps(rows, indent=2))
        return

    print(f"{'seed':>4}  {'model':<8} {'k=1':>8} {'k=8':>8} {'gap':>8}")
    for row in rows:
        low = row["half_life_low"] if row["half_life_low"] is not None else "-"
        high = row["half_life_high"] if row["half_life_high"] is not None else "-"
        print(f"{row['seed']:>4}  {row['model']:<8} {low:>8} {high:>8} {row['gap']:>8.0f}")
    for label in ("plain", "fourier"):
        gaps = [r["gap"] for r in rows if r["model"] == label]
        print(f"mean gap ({label}): {sum(gaps) / len(gaps):.1f} iterations")


if __name__ == "__main__":
    main()
