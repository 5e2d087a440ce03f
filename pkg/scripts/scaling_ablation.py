"""Compare one-class SVM input scalings on a finished run.

Refits the SVM on the run's training embeddings under every scaling mode and
nu value, then reports mean dice/precision/recall on the late test phantoms.

    python3 scripts/scaling_ablation.py runs/desk/cfg.yaml [--method ddae] [--nu 0.01 0.1 0.3]
"""

import argparse

from octa import pipeline as P
from octa.config import load_config
from octa.evaluate import summarize
from octa.features import embed_dataset
from octa.ocsvm import SCALING_MODES, fit


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--method", default="ddae")
    ap.add_argument("--nu", type=float, nargs="+", default=[0.01, 0.1, 0.3, 0.5])
    args = ap.parse_args()

    cfg = load_config(args.config)
    enc = P._encoder(cfg, args.method)
    z_train = embed_dataset(enc, *P._training_patches(cfg))
    test = [P._prep(cfg, v["name"]) for v in P._volumes(cfg, "test") if v["label"] == "late"]
    z_test = [P._embed_volume(enc, vol) for vol in test]

    print(f"{'scaling':12s} {'nu':>5s} {'dice':>6s} {'prec':>6s} {'recall':>6s}")
    for mode in SCALING_MODES:
        for nu in args.nu:
            m = fit(z_train, nu, offset=cfg.svm.offset, scaling=mode, seed=cfg.seed)
            s = summarize([P._volume_metrics(vol, m.classify(z)) for vol, z in zip(test, z_test)])
            print(f"{mode:12s} {nu:5.2f} {s['dice']['mean']:6.3f} {s['precision']['mean']:6.3f} "
                  f"{s['recall']['mean']:6.3f}", flush=True)


if __name__ == "__main__":
    main()
