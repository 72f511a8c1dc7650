"""Fraction of changed head entries between consecutive iterations."""
from _common import parser, write_rows
from qsenn import PlantedSpec, RunConfig, gen_planted, qsenn_fit

p = parser(__doc__, "results/convergence.csv")
p.add_argument("--iterations", type=int, default=8)
args = p.parse_args()
rows = []
for s in range(args.seeds):
    train, _, _ = gen_planted(PlantedSpec(seed=s))
    cfg = RunConfig(seed=s, n_iterations=args.iterations, n_f_selected=12, init_noise=1.0, dense_epochs=5,
                    finetune_lr=0.005)
    res = qsenn_fit(train, cfg)
    for it, delta in enumerate(res.iteration_deltas, start=1):
        rows.append({"seed": s, "iteration": it, "changed_fraction": delta})
    rows.append({"seed": s, "iteration": args.iterations, "changed_fraction": res.final_delta})
    print(s, [round(d, 4) for d in res.iteration_deltas], flush=True)
write_rows(args.out, rows)
