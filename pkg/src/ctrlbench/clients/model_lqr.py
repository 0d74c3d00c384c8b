"""Client running the tracking LQR on an identified robot model.

Usage: ``python -m ctrlbench.clients.model_lqr --model fitted_system_3.json``.
The model file is what ``ctrlbench fit-robo`` writes.
"""

import argparse
from pathlib import Path

from ctrlbench.controllers.robot_sysid import model_from_json, sysid_lqr_controller
from ctrlbench.protocol import serve


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model", required=True, type=Path, help="fitted model JSON")
    args = ap.parse_args(argv)
    model = model_from_json(args.model.read_text())

    def factory(hello):
        ctrl = sysid_lqr_controller(model)
        ctrl.reset()
        return lambda step, obs, target: ctrl.query(step, obs, target)

    serve(factory)


if __name__ == "__main__":
    main()
