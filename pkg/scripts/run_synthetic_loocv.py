"""Leave-one-subject-out on a freshly generated synthetic cohort.

    python scripts/run_synthetic_loocv.py --subjects 5 --epochs 10 --task t0t4
"""
import argparse
import json

from painattn.model import ModelConfig
from painattn.synth import ProtocolConfig, generate_cohort
from painattn.train import TrainConfig, get_task, loocv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--subjects", type=int, default=5)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--task", default="t0t4")
    ap.add_argument("--noise", type=float, default=0.05)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--mini", action="store_true", help="small model for a quick look")
    ap.add_argument("--temp-mode", default="verbatim", choices=("verbatim", "endpoint"))
    ap.add_argument("--json", help="write folds and pooled metrics here")
    args = ap.parse_args()

    task = get_task(args.task)
    windows = generate_cohort(ProtocolConfig(temp_mode=args.temp_mode), seed=args.seed,
                              subjects=args.subjects, noise=args.noise)
    model_cfg = ModelConfig.mini() if args.mini else ModelConfig()
    result = loocv(windows, task, TrainConfig(epochs=args.epochs, seed=args.seed), model_cfg, jobs=args.jobs,
                   on_fold=lambda f: print(f"subject {f.subject}: acc {f.accuracy:.3f} "
                                           f"baseline {f.baseline_accuracy:.3f} ({f.seconds:.0f}s)", flush=True))
    print(result.report.to_text(), end="")
    print(f"baseline acc {result.baseline.acc:.6f} kappa {result.baseline.kappa:.6f}")
    print(f"wall {result.seconds:.0f}s")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"args": vars(args), "report": result.report.to_dict(),
                       "baseline": result.baseline.to_dict(),
                       "folds": [{"subject": f.subject, "accuracy": f.accuracy, "losses": f.losses}
                                 for f in result.folds]}, fh, indent=2)


if __name__ == "__main__":
    main()
