"""Accuracy and interpretability metrics while varying the number of kept
features and the weights per class."""
import dataclasses

from _common import parser, write_rows
from qsenn import PlantedSpec, RunConfig, evaluate_model, gen_planted, qsenn_fit
from qsenn.trainer import train_dense

p = parser(__doc__, "results/tradeoff.csv")
p.add_argument("--features", type=int, nargs="+", default=[4, 8, 12, 16, 20])
p.add_argument("--budgets", type=int, nargs="+", default=[1, 2, 3, 5, 8])
args = p.parse_args()
rows = []
for s in range(args.seeds):
    train, test, _ = gen_planted(PlantedSpec(seed=s))
    dense = train_dense(train, RunConfig(seed=s))
    grid = [(n_f, 5) for n_f in args.features] + [(12, b) for b in args.budgets if b != 5]
    for n_f, budget in grid:
        cfg = RunConfig(seed=s, n_f_selected=n_f, per_class_budget=budget)
        res = qsenn_fit(train, cfg, dense=dense)
        rep = evaluate_model(res.model, train, test)
        rows.append({"seed": s, "n_features": n_f, "per_class_budget": budget, **dataclasses.asdict(rep)})
        print(rows[-1], flush=True)
write_rows(args.out, rows)
