"""Pre-train on the many-environment corpus, then fine-tune on two shifted sources.

For each seed this prints the target accuracy of plain fine-tuning (gamma = 0)
and of the gamma picked by source validation, with the ratio of the model's
sensitivity to the invariant feature over the spurious one.

    python demos/toy_transfer.py [n_seeds]
"""
import sys

import numpy as np

from ftlp.experiments import toy_transfer


def main(n_seeds=5):
    print(f"{'seed':>4} {'gamma':>8} {'acc@0':>7} {'acc@sel':>7} {'ratio@0':>9} {'ratio@sel':>9}")
    results = []
    for seed in range(n_seeds):
        r = toy_transfer(seed)
        results.append(r)
        print(f"{seed:>4} {r.selected_gamma:>8.1e} {r.baseline_target_acc:>7.3f} "
              f"{r.ftlp_target_acc:>7.3f} {r.baseline_ratio:>9.2f} {r.ftlp_ratio:>9.2f}")
    larger = sum(r.ftlp_ratio > r.baseline_ratio for r in results)
    print(f"mean target accuracy {np.mean([r.baseline_target_acc for r in results]):.3f} -> "
          f"{np.mean([r.ftlp_target_acc for r in results]):.3f}; "
          f"ratio larger on {larger}/{n_seeds} seeds")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 5)
