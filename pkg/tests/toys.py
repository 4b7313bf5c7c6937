"""A few-hundred-parameter double-precision network wired through the real bottleneck and losses."""
import torch
import torch.nn as nn
import torch.nn.functional as F

from kpdiscovery.model import render_gaussian, rotate_maps, soft_argmax
from kpdiscovery.objectives import (reconstruction_loss, rotation_loss, separation_loss, supervised_keypoint_loss,
                                    tiny_extractor)

SIGMA = 0.12


class ToyNet(nn.Module):
    def __init__(self, k=3):
        super().__init__()
        self.k = k
        self.c1 = nn.Conv2d(3, 4, 3, padding=1)
        self.c2 = nn.Conv2d(4, k, 1)
        self.dec = nn.Conv2d(3 + 2 * k, 3, 3, padding=1)

    def geometry(self, x):
        raw = self.c2(torch.tanh(self.c1(x)))
        raw = F.avg_pool2d(raw, 2)
        _, uv = soft_argmax(raw)
        return uv, render_gaussian(uv, SIGMA, raw.shape[-2:])

    def forward(self, ref, fut):
        uv_r, _ = self.geometry(ref)
        uv_f, _ = self.geometry(fut)
        g = render_gaussian(torch.cat([uv_r, uv_f], 1), SIGMA, ref.shape[-2:])
        return self.dec(torch.cat([ref, g], 1)), uv_r, uv_f


def make_problem(seed=0):
    torch.manual_seed(seed)
    net = ToyNet().double()
    ref, fut, tgt = torch.rand(3, 2, 3, 16, 16, dtype=torch.float64)
    annotated = torch.rand(2, 2, 2, dtype=torch.float64) * 0.6 + 0.2
    extractor = tiny_extractor((4, 6, 8), seed=seed).double()

    # pseudo labels are constants for the rotation term, so freeze them at the initial parameters
    with torch.no_grad():
        pseudo = rotate_maps(net.geometry(ref)[1], 1)

    def losses():
        pred, uv_r, uv_f = net(ref, fut)
        _, rot_pred = net.geometry(rotate_maps(ref, 1))
        return {
            "recon": reconstruction_loss(tgt, pred, extractor),
            "rot": rotation_loss(pseudo, rot_pred),
            "sep": separation_loss(torch.cat([uv_r, uv_f]), 0.2),
            "sup": supervised_keypoint_loss(uv_f, annotated, [2, 0], SIGMA, 8),
        }

    return net, losses


def analytic_grad(loss_fn, params):
    grads = torch.autograd.grad(loss_fn(), params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
