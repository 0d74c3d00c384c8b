"""Reference client that answers zero control but sleeps before some replies.

``--sleep-steps 7 --sleep 0.75`` delays only the reply to step 7;
``--always`` delays every reply.  Used to exercise the timeout rule.
"""

import argparse
import time

import numpy as np

from ctrlbench.protocol import serve


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sleep", type=float, default=0.75, help="seconds to sleep before a slow reply")
    ap.add_argument("--sleep-steps", type=int, nargs="*", default=[7], help="steps answered slowly")
    ap.add_argument("--always", action="store_true", help="answer every step slowly")
    args = ap.parse_args(argv)
    slow = set(args.sleep_steps)

    def factory(hello):
        p = int(hello["p"])

        def policy(step, obs, target):
            if args.always or step in slow:
                time.sleep(args.sleep)
            return np.zeros(p)

        return policy

    serve(factory)


if __name__ == "__main__":
    main()
