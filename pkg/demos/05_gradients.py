"""The autodiff engine on its own: gradients, a finite-difference check, and the tape contract."""
import numpy as np

from gfss import autodiff as ad
from gfss.errors import ContractError
from gfss.gradcheck import finite_difference_check

value, (g,) = ad.value_and_grad(lambda x: ad.sum_(x * x), [np.array([1.0, 2.0, 3.0])])
print("d/dx sum(x^2) at [1, 2, 3]:", g)

rng = np.random.default_rng(0)
W = rng.normal(size=(4, 3))
labels = np.array([0, 2, 1, 1, 0])


def loss(X, W):
    logp = ad.row_log_softmax(ad.tanh(X @ W))
    return ad.scale(ad.sum_(ad.mul(logp, np.eye(3)[labels])), -1 / 5)


report = finite_difference_check(loss, [rng.normal(size=(5, 4)), W])
print("max relative error vs central differences:", f"{report.max_rel_error:.2e}")

x = ad.Tensor(np.ones(2), requires_grad=True)
with ad.Tape() as tape:
    y = ad.sum_(ad.exp(x))
print("first backward:", tape.backward(y)[id(x)])
try:
    tape.backward(y)
except ContractError as err:
    print("second backward refused:", err)
