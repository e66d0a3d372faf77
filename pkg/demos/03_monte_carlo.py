"""
A small Monte Carlo comparison
==============================

Mean squared error of the balancing estimator and its competitors for the
treated-twice vs never-treated contrast, plus interval coverage. The
command-line equivalent is ``dcb simulate --profile desk --out-dir out/``.
"""

from dcb.simulation import METHOD_LABELS, SimConfig, run_replicates, summarize

cfg = SimConfig(n=200, T=2, p=50, eta=0.1, seed=0)
methods = ["dcb", "aipw_star", "lasso", "seq"]
records = run_replicates(cfg, methods, replicates=20)
result = summarize(records, methods, "contrast", cfg)

print(f"{'method':>8} {'MSE':>8} {'bias':>8} {'coverage':>9}")
for m, s in result.methods.items():
    cov = "" if s.coverage_chi is None else f"{s.coverage_chi:.2f}"
    print(f"{METHOD_LABELS[m]:>8} {s.mse:8.4f} {s.bias:8.4f} {cov:>9}")
