"""Reference client that answers every query with zero control."""

import numpy as np

from ctrlbench.protocol import serve


def main() -> None:
    serve(lambda hello: (lambda step, obs, target, p=int(hello["p"]): np.zeros(p)))


if __name__ == "__main__":
    main()
