"""What the per-modality low-rank adapters do to a frozen encoder.

    python3 demos/lora_adapters.py
"""

import numpy as np

from sartm.encoder import EncoderConfig, HierarchicalEncoder

cfg = EncoderConfig(embed_dim=32, lora_rank=4, image_size=(64, 64))
enc = HierarchicalEncoder(cfg, np.random.default_rng(0))
img = np.random.default_rng(1).random((1, 3, 64, 64)).astype(np.float32)

# W_b starts at zero, so a fresh adapter leaves the frozen encoder untouched
same = all(np.array_equal(a.data, b.data) for a, b in zip(enc.encode(img, "rgb"), enc.encode(img, "rgb", use_lora=False)))
print("fresh adapters reproduce the frozen encoder bitwise:", same)

for i, c in enumerate(cfg.stage_dims):
    layer = enc.adapters["rgb"][i]
    n = sum(p.size for p in (layer.lora_q.w_a, layer.lora_q.w_b, layer.lora_v.w_a, layer.lora_v.w_b))
    print(f"stage {i}: width {c:3d}, adapter params {n:5d} = 4*{c}*{cfg.lora_rank}, full q+v would be {2 * c * c}")

# give the thermal adapters some weight; the RGB path does not move
for name, p in enc.lora_parameters("thermal").items():
    p.data = np.random.default_rng(2).normal(scale=0.1, size=p.shape).astype(p.dtype)
rgb = enc.encode(img, "rgb", use_lora=False)[-1].data
th = enc.encode(img[:, :1], "thermal")[-1].data
th_base = enc.encode(img[:, :1], "thermal", use_lora=False)[-1].data
print("thermal output shift from adapters:", float(np.abs(th - th_base).mean()))
print("rgb output unaffected:", np.array_equal(rgb, enc.encode(img, "rgb")[-1].data))
