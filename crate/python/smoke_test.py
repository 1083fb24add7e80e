"""Smoke test for the `gem` extension module.

Build and install first:
    pip install maturin
    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/gem-*.whl
"""

import json
import os
import tempfile

import gem

config = json.dumps({
    "data": {"size": 60, "seed": 1},
    "model": {"hidden": 8, "layers": 1},
    "training": {"steps": 40, "n_warmup": 30, "n_cl": 5, "lambda_cl": 1.0,
                 "lr_warmup": 1e-3, "calibration_samples": 16, "seed": 3},
    "sampler": {"chains": 8, "steps": 30},
    "geodesic": {"iterations": 5, "points": 8, "locations": 4, "samples_per_location": 4},
})

spec = gem.GraphSpec(8, 3, 3)
data = gem.toy_dataset(config=config)
assert len(data) == 60 and all(gem.is_valid(g) for g in data)

model = gem.EnergyModel(spec, hidden=8, layers=1, seed=0)
history = model.train(data, config=config)
assert len(history) == 40
assert all(row[1] == row[1] for row in history), "flow loss is NaN"

g = data[0]
grad = model.gradient(g)
assert len(grad) == 8 * 3 + 28 * 3
print("energy of first graph", round(model.energy(g), 4))

samples = model.sample(data, seed=5, config=config)
again = model.sample(data, seed=5, config=config)
assert [s.edges for s in samples] == [s.edges for s in again], "sampling is not reproducible"
print("validity, uniqueness, novelty, vu, vun:", gem.vun(samples, data))

with tempfile.TemporaryDirectory() as d:
    path = os.path.join(d, "model.json")
    model.save(path)
    back = gem.EnergyModel.load(path)
    assert back.energy(g) == model.energy(g)

pair = next((a, b) for a in data for b in data if a.n == b.n and a != b)
for method, validity, energy in model.compare_paths(*pair, config=config):
    print(f"{method} path: validity {validity:.3f} energy {energy:.3f}")

try:
    gem.Graph(spec, [0, 1], [(0, 5, 1)])
except ValueError as e:
    print("rejected malformed graph:", e)
else:
    raise AssertionError("malformed graph accepted")

tv = gem.oracle_check_tiny(steps=200_000)
print("tiny oracle TV", round(tv, 4))
assert tv < 0.05
print("ok")
