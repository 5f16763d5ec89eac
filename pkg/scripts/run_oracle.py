"""End-to-end oracle run: 2-bone chain, 11 sparse views plus the t = 0 bundle.

Prints held-out PSNR, per-timestep joint-angle errors, skinning agreement and the
dense interpolation report, and writes them to ``--out`` as JSON.

    python scripts/run_oracle.py --steps 6000 --out oracle_run.json
"""

import argparse
import json
import logging
import time

import numpy as np

from skelsplat.deformation import DeformationConfig
from skelsplat.experiment import OracleExperiment, interpolation_report, prepare, run
from skelsplat.oracle import OracleSpec
from skelsplat.training import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--amplitude", type=float, default=20.0, help="joint angle amplitude in degrees")
    ap.add_argument("--steps", type=int, default=6000)
    ap.add_argument("--lr-theta", type=float, default=5e-4)
    ap.add_argument("--lr-phi", type=float, default=1e-5)
    ap.add_argument("--time-frequencies", type=int, default=4)
    ap.add_argument("--lr-psi", type=float, default=1e-4)
    ap.add_argument("--lr-radii", type=float, default=1e-3)
    ap.add_argument("--bulge", type=float, default=0.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--save-model", default=None)
    ap.add_argument("--out", default="oracle_run.json")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    exp = OracleExperiment(
        spec=OracleSpec(amplitude_deg=args.amplitude, bulge=args.bulge, seed=args.seed),
        train=TrainConfig(steps=args.steps, lr_theta=args.lr_theta, lr_phi=args.lr_phi,
                          deformation=DeformationConfig(time_frequencies=args.time_frequencies), lr_psi=args.lr_psi,
                          lr_radii=args.lr_radii, seed=args.seed),
    )
    t0 = time.time()
    ds, cloud = prepare(exp)
    logging.info("canonical fit done in %.0fs", time.time() - t0)

    def progress(step, rep):
        if step % 500 == 0:
            logging.info("step %d perceptual %.5f motion %.5f detail %.6f", step, rep.perceptual, rep.motion, rep.detail)

    res = run(exp, ds, cloud, progress)
    if args.save_model:
        res.model.save(args.save_model)
    out = res.summary()
    out["angle_errors_deg"] = np.round(res.angle_errors, 3).tolist()
    out["interpolation"] = interpolation_report(res.model, ds.scene, ds.train.times)
    out["seconds"] = time.time() - t0
    print(json.dumps(out, indent=2))
    with open(args.out, "w") as f:
        json.dump({"experiment": {"spec": exp.spec.to_dict(), "train": exp.train.to_dict()}, "result": out}, f, indent=2)


if __name__ == "__main__":
    main()
