"""Parameter census of the model variants.

Builds each ablation variant at 103 bands (a PaviaU-sized cube) and prints its
trainable parameter and BN buffer counts along with the band groups it uses.
No training happens here, so the script runs in well under a second.

    python3 demos/02_ablation_census.py
"""
from fgin.model import ModelConfig, buffer_count, layer_specs, param_count

BANDS = 103

variants = {
    "full model (groups of 32)": ModelConfig(n_bands=BANDS),
    "no band grouping": ModelConfig(n_bands=BANDS, use_band_grouping=False),
    "groups of 16": ModelConfig(n_bands=BANDS, group_size=16, overlap=4),
    "groups of 48": ModelConfig(n_bands=BANDS, group_size=48, overlap=12),
    "no spectral fusion": ModelConfig(n_bands=BANDS, use_spectral_fusion=False),
    "bilinear upsampling only": ModelConfig(n_bands=BANDS, upsampling="bilinear_only"),
}

print(f"{'variant':28s} {'params':>8s} {'buffers':>8s}  groups")
for name, cfg in variants.items():
    groups = " ".join(f"[{a},{b})" for a, b in cfg.group_spec().intervals)
    print(f"{name:28s} {param_count(cfg):8d} {buffer_count(cfg):8d}  {groups}")

# Layer-by-layer view of the default network.
print()
for spec in layer_specs(variants["full model (groups of 32)"]):
    print(spec)
