"""Exponential mixture whose conditional law turns bimodal as X grows (tau = 0.8).

Compares a single interval (flow family, d = 1) with a two-component union
against the grid oracle: interval count and total length per X.
"""

import numpy as np

from _common import calibrated, intervals, parser, setup, splits, write_json
from slsreg.evaldata import get_task
from slsreg.evaldata.oracles import oracle_hdr
from slsreg.frontiers import FrontierConfig
from slsreg.training import TrainConfig, train

TAU = 0.8
X_VALUES = (-1.0, -0.5, 0.0, 0.5, 1.0)


def main():
    args = parser(__doc__, steps=3000).parse_args()
    out = setup(args)
    task = get_task("exp_mixture1d")
    tr, cal, te = splits(task, 8000, args.seed)
    cfg = TrainConfig(tau=TAU, total_steps=args.steps, lr_frontier=3e-3, lr_quantile=3e-3, eval_every=100,
                      seed=args.seed)
    models = {
        "interval": FrontierConfig(response_dim=1, hidden_dims=[32, 32]),
        "union2": FrontierConfig(family="union", response_dim=1, n_components=2, hidden_dims=[32, 32]),
    }
    grid = np.linspace(-1.0, 5.0, 6001)
    summary = {"tau": TAU, "oracle": {}, "models": {}}
    for x in X_VALUES:
        o = oracle_hdr(task, x, TAU)
        summary["oracle"][str(x)] = {"intervals": o.intervals, "length": o.volume}
    for name, fcfg in models.items():
        region = calibrated(train(tr.X, tr.Y, cfg, fcfg).region, cal)
        rows = {}
        for x in X_VALUES:
            inside = region.contains(np.full((len(grid), 1), x), grid.reshape(-1, 1))
            runs = intervals(inside, grid)
            rows[str(x)] = {"intervals": runs, "length": float(inside.mean() * (grid[-1] - grid[0]))}
        summary["models"][name] = {"coverage": float(region.contains(te.X, te.Y).mean()),
                                   "mean_length": float(region.volumes(te.X).mean()), "per_x": rows}
    write_json(out / "exp_mixture.json", summary)


if __name__ == "__main__":
    main()
