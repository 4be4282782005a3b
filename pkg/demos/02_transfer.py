# One seed of the synthetic transfer experiment: pre-train on two source
# domains, rank the held-out target domain zero-shot, fine-tune the heads,
# and compare with the three ablations. Takes a couple of minutes.

import sys
import time

from protorec.datamodel import SyntheticConfig, generate_synthetic
from protorec.pipeline import catalog_hit_baseline, run_variant

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
bundle = generate_synthetic(SyntheticConfig(), seed)
target = bundle.target_domains[0]
print("target domain %d, random Hit@5 = %.4f" % (target, catalog_hit_baseline(bundle, target)))

print("%-10s %8s %8s %8s %8s" % ("variant", "zs H@5", "zs N@5", "ft N@5", "purity"))
for variant in ((), ("cpl",), ("pea",), ("gl",)):
    t0 = time.time()
    r = run_variant(bundle, variant, seed)
    name = "full" if not variant else "w/o " + variant[0]
    print("%-10s %8.4f %8.4f %8.4f %8.3f   (%.0fs)" % (name, r.zero_shot.hit5, r.zero_shot.ndcg5,
                                                       r.normal.ndcg5, r.purity, time.time() - t0))
    if not variant:
        for e in r.pretrain_log:
            print("    epoch %d  L_PT %.4f  L_ET %.4f  L_CP %.4f" % (e.epoch, e.l_pt, e.l_et, e.l_cp))
