"""Final autonomous penalty and test MSE of a ResNet flow on the sink data for several weights."""
import argparse
import csv

import numpy as np

from neural_flows.autograd import no_grad
from neural_flows.config import ExperimentConfig
from neural_flows.flows import autonomous_penalty
from neural_flows.training import train


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", default="configs/sink_resnet_penalty.json")
    p.add_argument("--gammas", type=float, nargs="+", default=[0.0, 0.01, 0.1, 1.0])
    p.add_argument("--out", default="penalty.csv")
    args = p.parse_args()
    base = ExperimentConfig.load(args.config)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gamma", "test_mse", "penalty"])
        for gamma in args.gammas:
            result = train(base.replace(gamma=gamma))
            x0, _, t, _ = result.dataset["test"].flat()
            with no_grad():
                pen = autonomous_penalty(result.model.flow, t.reshape(-1, 1), x0, np.random.default_rng(0)).item()
            w.writerow([gamma, result.metrics["test_mse"], pen])
            print(f"gamma {gamma:g}  test mse {result.metrics['test_mse']:.4e}  penalty {pen:.4e}", flush=True)


if __name__ == "__main__":
    main()
