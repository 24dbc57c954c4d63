"""Dopri5 function evaluations per unit time on the stiff field versus x' = x."""
import argparse

import numpy as np

from neural_flows.autograd import as_tensor
from neural_flows.ode import SolverConfig, ode_solve


def stiff(t, x):
    return -1000.0 * x + 3000.0 - 2000.0 * (-as_tensor(t)).exp()


def smooth(t, x):
    return x


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--rtol", type=float, default=1e-3)
    p.add_argument("--atol", type=float, default=1e-4)
    args = p.parse_args()
    cfg = SolverConfig("dopri5", rtol=args.rtol, atol=args.atol)
    print("t_end  stiff_evals_per_t  smooth_evals_per_t  ratio")
    for t_end in (0.125, 1.0, 5.0, 15.0):
        a = ode_solve(stiff, np.zeros(1), 0.0, t_end, cfg).n_evals / t_end
        b = ode_solve(smooth, np.ones(1), 0.0, t_end, cfg).n_evals / t_end
        print(f"{t_end:5g}  {a:17.1f}  {b:18.1f}  {a / b:5.1f}")


if __name__ == "__main__":
    main()
