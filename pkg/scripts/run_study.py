"""Run the full cross-domain battery and print a median-over-seeds table."""
import argparse
import logging

from pulsebench import study


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--root", default="study_out")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--variants", nargs="+", default=list(study.VARIANTS))
    a = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = study.StudyConfig(seeds=tuple(a.seeds), variants=tuple(a.variants))
    results = study.run_study(a.root, cfg)
    print(f"{'variant':22s} {'MAE':>6s} {'RMSE':>6s} {'V+VI MAE':>9s}")
    for name in cfg.variants:
        mae = study.median_over_seeds(results, name)
        rmse = study.median_over_seeds(results, name, "rmse")
        dark = study.median_over_seeds(results, name, skin_type="V+VI")
        print(f"{name:22s} {mae:6.2f} {rmse:6.2f} {dark:9.2f}")


if __name__ == "__main__":
    main()
