"""Independent from-scratch fit used to pin the baseline PSNR.

Reads crops and initial sets as JSON (a list of objects with keys image,
mu, log_scale, theta, color; images are row-major interleaved RGB, 64x64)
and fits each with torch autograd, dense rendering and torch.optim.Adam.

    python3 tools/reference_fit.py input.json [iterations]
"""

import json
import math
import sys

import torch

torch.set_default_dtype(torch.float64)
torch.set_num_threads(4)

W = H = 64
CUTOFF2 = 9.0
FLOOR_VAR = 0.09
LR = dict(mu=5e-3, log_scale=5e-3, theta=5e-3, color=1e-2)


def render(mu, log_scale, theta, color):
    mu = mu * torch.tensor([W, H])
    var = torch.clamp(torch.exp(2 * log_scale), min=FLOOR_VAR)
    s, c = torch.sin(theta), torch.cos(theta)
    ia = c * c / var[:, 0] + s * s / var[:, 1]
    ib = c * s * (1 / var[:, 0] - 1 / var[:, 1])
    ic = s * s / var[:, 0] + c * c / var[:, 1]
    ys, xs = torch.meshgrid(torch.arange(H) + 0.5, torch.arange(W) + 0.5, indexing="ij")
    dx = xs.reshape(1, -1) - mu[:, :1]
    dy = ys.reshape(1, -1) - mu[:, 1:]
    m2 = ia[:, None] * dx * dx + 2 * ib[:, None] * dx * dy + ic[:, None] * dy * dy
    a = torch.exp(-0.5 * m2) * (m2 <= CUTOFF2)
    return (a.T @ color).reshape(H, W, 3)


def window():
    x = torch.arange(11) - 5.0
    g = torch.exp(-x * x / (2 * 1.5 * 1.5))
    return g / g.sum()


def blur(img):
    # img: (C, H, W); zero-padded separable filter divided by the filter of ones
    g = window()
    def sep(x):
        x = torch.nn.functional.conv2d(x[:, None], g.view(1, 1, 1, 11), padding=(0, 5))
        x = torch.nn.functional.conv2d(x, g.view(1, 1, 11, 1), padding=(5, 0))
        return x[:, 0]
    return sep(img) / sep(torch.ones_like(img[:1]))


def ssim(x, y):
    x, y = x.permute(2, 0, 1), y.permute(2, 0, 1)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mx, my = blur(x), blur(y)
    vx = blur(x * x) - mx * mx
    vy = blur(y * y) - my * my
    cxy = blur(x * y) - mx * my
    m = (2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return m.mean()


def loss(pred, target):
    return 0.7 * (pred - target).abs().mean() + 0.3 * (1 - ssim(pred, target))


def psnr(pred, target):
    mse = ((pred - target) ** 2).mean().item()
    return min(100.0, 10 * math.log10(1 / mse)) if mse > 0 else 100.0


def fit(item, iters):
    target = torch.tensor(item["image"]).reshape(H, W, 3)
    params = dict(
        mu=torch.tensor(item["mu"]) / torch.tensor([W, H]),
        log_scale=torch.tensor(item["log_scale"]),
        theta=torch.tensor(item["theta"]),
        color=torch.tensor(item["color"]),
    )
    for p in params.values():
        p.requires_grad_(True)
    opt = torch.optim.Adam([dict(params=[params[k]], lr=LR[k]) for k in LR], betas=(0.9, 0.999), eps=1e-8)
    for _ in range(iters):
        opt.zero_grad()
        loss(render(**params), target).backward()
        opt.step()
    with torch.no_grad():
        return psnr(render(**params), target)


def main():
    items = json.load(open(sys.argv[1]))
    iters = int(sys.argv[2]) if len(sys.argv) > 2 else 2000
    for i, item in enumerate(items):
        print(f"crop {i + 1}: {fit(item, iters):.3f} dB", flush=True)


if __name__ == "__main__":
    main()
