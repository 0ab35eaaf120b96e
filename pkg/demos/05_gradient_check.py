"""
Checking gradients by finite differences
========================================

Every training loss can be checked on a miniature float64 model: perturb each
parameter by +-eps and compare the central difference with autograd.
"""

# %%
import torch

from stochuda import gradcheck, segmentation

torch.manual_seed(0)
net = segmentation.SegNet(1, 3).double()
D = segmentation.EntropyDiscriminator(3, 1).double()
x_s = torch.rand(2, 3, 16, 16, dtype=torch.float64)
x_t = torch.rand(2, 3, 16, 16, dtype=torch.float64)
y_s = torch.randint(0, 3, (2, 16, 16))
print("parameters:", sum(p.numel() for p in net.parameters()))

# %%
# Pretraining objective: cross-entropy plus the entropy-adversarial term.
res = gradcheck.check("pretrain", lambda: segmentation.pretrain_objective(net, D, x_s, y_s, x_t, 0.5)["total"],
                      list(net.parameters()))
print(f"{res.name}: relative error {res.rel_error:.1e} over {res.n_params} parameters")
