"""A tour of the autodiff core: eager graphs, gradients, and gradients of
gradients.

The engine records every operation in an append-only graph and emits
backward passes as more graph operations. That is the property everything
else here relies on: the gradient of a loss is itself a node, so you can
differentiate through a gradient-descent step.
"""
import numpy as np

from metaloss import Graph

g = Graph()
x = g.variable(3.0)
y = g.square(x)
print("x = 3,  x^2 =", g.scalar(y))

# First derivative: a live graph node, not just a number.
first = g.grad(y, [x], create_graph=True)[x]
print("d/dx x^2          =", g.scalar(first), "(expect 6)")

# Differentiate the derivative.
second = g.grad(first, [x])[x]
print("d^2/dx^2 x^2      =", g.scalar(second), "(expect 2)")

# The same works through matrix code. Build a tiny least-squares problem
# and differentiate the loss after one gradient-descent step on w.
rng = np.random.default_rng(0)
a = rng.normal(size=(6, 2))
b = rng.normal(size=(6, 1))
w0 = rng.normal(size=(2, 1))
lr = 0.25

g = Graph()
w = g.variable(w0)
residual = g.sub(g.matmul(g.constant(a), w), g.constant(b))
inner = g.mean(g.square(residual))
step = g.grad(inner, [w], create_graph=True)[w]
w1 = g.sub(w, g.scalar_mul(step, lr))          # one descent step, in-graph
residual1 = g.sub(g.matmul(g.constant(a), w1), g.constant(b))
outer = g.mean(g.square(residual1))
meta = g.value(g.grad(outer, [w])[w])          # gradient THROUGH the step

print("\nloss before step  =", round(g.scalar(inner), 5))
print("loss after step   =", round(g.scalar(outer), 5))
print("meta-gradient     =", meta.ravel())

# Check the meta-gradient against central finite differences.
def loss_after_step(wv):
    gg = Graph()
    ww = gg.variable(wv)
    res = gg.sub(gg.matmul(gg.constant(a), ww), gg.constant(b))
    s = gg.grad(gg.mean(gg.square(res)), [ww], create_graph=True)[ww]
    w_next = gg.sub(ww, gg.scalar_mul(s, lr))
    res1 = gg.sub(gg.matmul(gg.constant(a), w_next), gg.constant(b))
    return gg.scalar(gg.mean(gg.square(res1)))

h = 1e-5
fd = np.zeros_like(w0)
for i in range(2):
    up, down = w0.copy(), w0.copy()
    up[i, 0] += h
    down[i, 0] -= h
    fd[i, 0] = (loss_after_step(up) - loss_after_step(down)) / (2 * h)

print("finite difference =", fd.ravel())
print("max abs error     =", np.max(np.abs(fd - meta)))
