"""Fit MM, Naive and classical models to one simulated sample and compare them.

    python3 scripts/fit_example.py --seed 3 --eps-case 0.1 --K 2
"""

import argparse

from robfpca import simulation as sim


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenario", choices=sorted(sim.PRESETS), default="lrs-like")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--d", type=float, default=1.0, help="decimation rate")
    ap.add_argument("--eps-case", type=float, default=0.0)
    ap.add_argument("--eps-cell", type=float, default=0.0)
    ap.add_argument("--K", type=float, default=0.0)
    args = ap.parse_args()

    sc = sim.PRESETS[args.scenario]()
    sample, data, clean = sim.prepare_replication(sc, args.d, sim.Setting(args.eps_case, args.eps_cell),
                                                  args.K, 0, args.seed)
    print(f"{sc.name}: n={data.n} p={data.p} observed fraction={data.decimation_rate:.3f}")
    for est in sim.ESTIMATORS:
        if est != "mm" and not data.is_complete:
            print(f"{est:>10}: needs complete data")
            continue
        m = sim.fit_estimator(est, data, sc.q)
        err = sim.mae(sample.data.values, m.fitted_values(), rows=clean)
        ang = sim.subspace_sin_angle(m.directions, sample.directions)
        print(f"{est:>10}: MAE {err:.4f}  sin(alpha) {ang:.4f}  explained {m.explained:.3f}")


if __name__ == "__main__":
    main()
