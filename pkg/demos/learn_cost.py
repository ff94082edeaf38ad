r"""
Learning a cost from moon labels
================================

Only the moon membership of each point is known. Training the degree-2
polynomial cost through the unrolled Sinkhorn iterations pushes the plan's
mass into the matching moon. A short run is used here; the default
configuration trains for 100 epochs.
"""

from otsi import (AlignmentProblem, Correspondence, MoonSpec, TrainConfig, euclidean_init,
                  evaluate, train, two_moons_splits)

splits = two_moons_splits(MoonSpec(seed=0))
problems = {name: AlignmentProblem(s.cloud, t.cloud) for name, (s, t) in splits.items()}
labels = {name: Correspondence.from_labels(s.labels, t.labels) for name, (s, t) in splits.items()}

config = TrainConfig.from_dict({"epochs": 20})
model, report = train(problems["train"], problems["val"], labels["train"], labels["val"],
                      euclidean_init(2), config,
                      callback=lambda epoch, row: print(f"epoch {epoch:3d}  {row}"))

before = evaluate(problems["test"], euclidean_init(2), labels["test"])["subset_accuracy"]
after = evaluate(problems["test"], model, labels["test"])["subset_accuracy"]
print(f"best epoch {report.best_epoch}; test subset accuracy {before:.3f} -> {after:.3f}")
