"""Pre-train, search, fine-tune and report on the 4-class blob task; then a lambda sweep."""
from sbs.costmodel import discrete_cost
from sbs.data import make_blobs
from sbs.trainer import SearchRunConfig, build_model, finetune, pretrain, search

data = make_blobs(seed=0)
cfg = SearchRunConfig(lam=0.1)
model = pretrain(build_model(data, cfg, (32,)), data, cfg)
print(f"float accuracy: {model.accuracy(data.x_test, data.y_test):.3f}")

res = search(model, data, cfg)
for row in res.trace:
    print(f"epoch {row.epoch} {row.phase:8s} ce={row.ce_loss:.4f} bops={row.bops:.0f} {row.gates}")
print("config:", res.config.summary())

tuned, acc = finetune(res.model.clone(), res.config, data, cfg)
print(f"fine-tuned accuracy: {acc:.3f}")
print(discrete_cost(model.specs, res.config).to_json())

print("\nlambda sweep")
for lam in (0.0, 0.01, 0.1, 1.0):
    c = cfg.replace(lam=lam)
    m = pretrain(build_model(data, c, (32,)), data, c)
    r = search(m, data, c)
    print(f"lam={lam:<5} bops={discrete_cost(m.specs, r.config).bops:>8.0f}  {r.config.summary()}")
