r"""
Gradients through the iterations
================================

``loss_grad`` backpropagates through every Sinkhorn iteration. Here it is
compared with central finite differences of the same fixed-length solver
along a random direction in parameter space.
"""

import numpy as np

from otsi import (AlignmentProblem, Correspondence, PointCloud, PolyCostModel, cost_matrix,
                  euclidean_init, loss_grad, side_info_loss, sinkhorn)
from otsi.side_info import build_forbidden

rng = np.random.default_rng(3)
X, Y = rng.uniform(-1, 1, (8, 2)), rng.uniform(-1, 1, (9, 2))
problem = AlignmentProblem(PointCloud(X), PointCloud(Y), 50.0, 300)
corr = Correspondence.from_labels(np.r_[0, 1, rng.integers(0, 2, 6)], np.r_[0, 1, rng.integers(0, 2, 7)])
forb = build_forbidden(corr, 8, 9)
model = PolyCostModel((2, 2), euclidean_init(2).theta + 0.1 * rng.standard_normal(14))

loss, grad = loss_grad(problem, model, corr)
d = rng.standard_normal(grad.shape)


def value(theta):
    C = cost_matrix(model.with_theta(theta), problem.source, problem.target)
    return side_info_loss(sinkhorn(problem, C), forb)


print(f"loss {loss:.6e}; directional derivative from the adjoint {grad @ d:+.8e}")
for h in (1e-3, 1e-4, 1e-5):
    fd = (value(model.theta + h * d) - value(model.theta - h * d)) / (2 * h)
    print(f"h={h:.0e}: finite difference {fd:+.8e}, gap {abs(fd - grad @ d):.1e}")
