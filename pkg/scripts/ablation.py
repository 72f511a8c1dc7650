"""Full pipeline against the variants without quantization and without
iteration, sharing one dense model per seed."""
import dataclasses

from _common import parser, write_rows
from qsenn import PlantedSpec, RunConfig, evaluate_model, gen_planted, qsenn_fit
from qsenn.trainer import train_dense

p = parser(__doc__, "results/ablation.csv")
p.add_argument("--init-noise", type=float, default=1.0, dest="init_noise")
p.add_argument("--dense-epochs", type=int, default=5, dest="dense_epochs")
args = p.parse_args()
rows = []
for s in range(args.seeds):
    train, test, _ = gen_planted(PlantedSpec(seed=s))
    base = RunConfig(seed=s, n_f_selected=12, init_noise=args.init_noise, dense_epochs=args.dense_epochs,
                     finetune_lr=0.005)
    dense = train_dense(train, base)
    for name, cfg in (("full", base), ("no-quantization", base.replace(quantize=False)),
                      ("no-iteration", base.replace(n_iterations=1))):
        res = qsenn_fit(train, cfg, dense=dense)
        rep = evaluate_model(res.model, train, test)
        rows.append({"seed": s, "variant": name, **dataclasses.asdict(rep),
                     "support_stability": res.support_stability})
        print(rows[-1], flush=True)
write_rows(args.out, rows)
