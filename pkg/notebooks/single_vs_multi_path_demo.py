"""Gated single-path residual quantizer vs softmax multi-path mixing on linear regression."""
from sbs.baselines import RegressionTask, run_prop1_experiment

rec = run_prop1_experiment(RegressionTask(n=10_000, d=10, noise_std=1.0), steps=400, seeds=range(5))
print("final loss single:", rec.final_single)
print("final loss multi: ", rec.final_multi)
print("relative gap:     ", rec.relative_gap)
print("discretizations per step:", rec.counts)
print(f"residual/full ratio {rec.residual_to_full_ratio:.4f}, path reduction {rec.path_reduction:.4f}")
print("trainable parameters:", rec.params)
