"""Derive plans from dataset fingerprints and print the stage-wise layout.

Run: python3 demos/plan_tour.py
"""

from clinix.net import ABLATIONS, Fingerprint, ablation_plan, build, derive_plan, preset_plan


def describe(plan):
    orders = plan.hgcn_orders_by_stage()
    blocks = [f"{k}{orders[i]}" if k == "H" else k for i, k in enumerate(plan.block_kinds)]
    print(f"{plan.name:>28}: patch {plan.patch_size} blocks {' '.join(blocks)} "
          f"pooling {plan.pooling_per_axis()}")


def main():
    for name in ("pcd", "lungt", "livert", "abd", "brats", "toy", "micro"):
        describe(preset_plan(name))

    print("\nderived from fingerprints:")
    for shape, spacing in [((128, 128, 128), (1.0, 1.0, 1.0)), ((60, 256, 256), (3.0, 0.8, 0.8))]:
        describe(derive_plan(Fingerprint(median_shape=shape, spacing=spacing, class_count=2)))

    print("\nablations of the ABD plan:")
    base = preset_plan("abd")
    for variant in ABLATIONS:
        describe(ablation_plan(base, variant))

    net = build(preset_plan("toy"), 1, 2, seed=0)
    total = sum(p.data.size for _, p in net.named_parameters())
    print(f"\ntoy network parameters: {total}")


if __name__ == "__main__":
    main()
