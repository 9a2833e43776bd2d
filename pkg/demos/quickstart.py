"""A few-minute tour of the library API on a reduced rig.

Generates scenes, trains the toy victim, optimizes two texture seeds and
compares them with the baselines under paired evaluation:

- the default objective (vanishing + smoothness + printability losses)
- the vanishing loss alone

At the default weights the two regularizers dominate the gradient on this
rig, which the second attack makes visible. For the full desk-scale run use
``camodepth end-to-end`` instead.
"""
import copy
import time

from camodepth.config import PipelineConfig
from camodepth.evalmetrics import breakdown, summary_table
from camodepth.pipeline import eval_stage, gen_scenes, resolved, train_stage
from camodepth.attack import optimize_texture

cfg = PipelineConfig(seed=0)
cfg.data.train_count, cfg.data.attack_count, cfg.data.eval_count = 120, 40, 40
cfg.train.epochs = 60
cfg.attack.epochs = 5

t0 = time.perf_counter()
sets = gen_scenes(cfg)
print(f"scenes: {', '.join(f'{k} {len(v)}' for k, v in sets.items())}  ({time.perf_counter() - t0:.0f}s)")

result = train_stage(cfg, sets["train"])
print(f"victim: held-out log-depth error {result.val_error:.4f} (target {cfg.train.target})")

attack_cfg = resolved(cfg).attack
vanish_only = copy.deepcopy(attack_cfg)
vanish_only.loss_terms = ("a",)
runs = {}
for name, acfg in (("default", attack_cfg), ("vanish-only", vanish_only)):
    run = optimize_texture(result.model, sets["attack"], acfg)
    first, last = run.trace[0], run.trace[-1]
    print(f"{name} attack: {len(run.trace)} steps, L_a {first['L_a']:.4g} -> {last['L_a']:.4g}, "
          f"L_total {first['L_total']:.4g} -> {last['L_total']:.4g}")
    runs[name] = run

reports = eval_stage(cfg, result.model, sets["eval"], runs["default"].seed)
extra = eval_stage(cfg, result.model, sets["eval"], runs["vanish-only"].seed)[0]
extra.method = "vanish-only"
reports.insert(1, extra)
print(summary_table(reports), end="")
print("optimized texture by weather:")
for row in breakdown(reports[0], "weather"):
    if row.count:
        print(f"  {row.label:<8} n={row.count:<3} E_d={row.mean_e_d:.3f}")
print(f"total {time.perf_counter() - t0:.0f}s")
