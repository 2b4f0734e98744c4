"""
Widening the stem for pre + post input
======================================

A post-only network is widened to six input channels by splitting each stem
kernel in half across the pre and post copies. Feeding the same image twice
reproduces the post-only output bit for bit.
"""
import torch

from damagelab.model import ModelConfig, build_model, widen_to_pre_post

post_only = build_model(ModelConfig("post_only", "ce", crop_side=64), seed=0).eval()
pre_post = widen_to_pre_post(post_only).eval()

x = torch.randn(2, 3, 64, 64)
with torch.no_grad():
    a = post_only(x)
    b = pre_post(torch.cat([x, x], dim=1))
print("post-only logits:", a[0].tolist())
print("pre+post logits: ", b[0].tolist())
print("identical:", torch.equal(a, b))

# a pre image that differs from the post image moves the output
with torch.no_grad():
    c = pre_post(torch.cat([torch.zeros_like(x), x], dim=1))
print("max change with a blank pre image:", (c - a).abs().max().item())
