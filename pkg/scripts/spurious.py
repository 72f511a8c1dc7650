"""Dense versus sparse-ternary test accuracy when the training background
predicts the class, across background strengths."""
import numpy as np

from _common import parser, write_rows
from qsenn import PlantedSpec, RunConfig, gen_spurious, qsenn_fit
from qsenn.trainer import predict, train_dense

p = parser(__doc__, "results/spurious.csv")
p.add_argument("--levels", type=float, nargs="+", default=[0.1, 0.15, 0.2, 0.3])
p.add_argument("--features", type=int, default=12)
args = p.parse_args()
rows = []
for level in args.levels:
    for s in range(args.seeds):
        spec = PlantedSpec(seed=s, spurious=True, background_level=level)
        train, test, _ = gen_spurious(spec)
        cfg = RunConfig(seed=s, n_f_selected=args.features)
        dense = train_dense(train, cfg)
        res = qsenn_fit(train, cfg, dense=dense)
        acc = {name: float(np.mean(predict(m, ds.inputs) == ds.labels))
               for name, m, ds in (("dense_train", dense[0], train), ("dense_test", dense[0], test),
                                   ("qsenn_train", res.model, train), ("qsenn_test", res.model, test))}
        n_bg = int(np.sum(res.model.feature_ids >= spec.d_total))
        rows.append({"background_level": level, "seed": s, **acc, "background_features_kept": n_bg})
        print(rows[-1], flush=True)
write_rows(args.out, rows)
