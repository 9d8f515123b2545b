"""Overfit the toy network on one synthetic volume and report the DSC curve.

Takes a couple of minutes on one CPU core.

Run: python3 demos/overfit_toy.py [additive|multiplicative]
"""

import sys

from clinix.losses import LossConfig
from clinix.synth import SynthSpec, synth_generate
from clinix.train import TrainConfig, evaluate, train


def main(gating="additive"):
    data = synth_generate(SynthSpec(seed=3), 1)
    print(f"sample {data[0].id}: foreground ratio {data[0].target_ratio():.4f}")
    cfg = TrainConfig(plan="toy", lr=3e-3, steps_per_epoch=20, epochs=10,
                      loss=LossConfig(alpha=0.3, beta=0.7, normalize_regions=True),
                      plan_overrides={"gating": gating})
    result = train(cfg, data, log=print)
    m = evaluate(result.net, data)
    print(f"eval-mode DSC {m.mean_dsc:.4f} recall {m.mean_recall:.4f}")


if __name__ == "__main__":
    main(*sys.argv[1:])
